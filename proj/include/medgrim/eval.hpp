#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medgrim/session.hpp"

namespace medgrim {

/// One row of a QA JSONL file:
///   {"question": "...", "image": "path"?, "expected_keywords": [...]?, "expected_answer": "..."?, "answers": [...]?}
/// `answers` are replayed, in order, as the user's replies to the clarifying
/// questions; missing entries count as skips.
struct QaItem {
    std::string question;
    std::optional<std::string> image;
    std::vector<std::string> expected_keywords;
    std::optional<std::string> expected_answer;
    std::vector<std::string> answers;
};

inline std::vector<QaItem> parse_qa_jsonl(std::istream& in) {
    std::vector<QaItem> items;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            QaItem item;
            item.question = j.at("question").get<std::string>();
            if (j.contains("image") && !j.at("image").is_null()) item.image = j.at("image").get<std::string>();
            if (j.contains("expected_keywords")) item.expected_keywords = j.at("expected_keywords").get<std::vector<std::string>>();
            if (j.contains("expected_answer")) item.expected_answer = j.at("expected_answer").get<std::string>();
            if (j.contains("answers")) item.answers = j.at("answers").get<std::vector<std::string>>();
            if (item.expected_keywords.empty() && !item.expected_answer) {
                throw Error(ErrorCode::MalformedInput, "needs expected_keywords or expected_answer");
            }
            items.push_back(std::move(item));
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::MalformedInput, "QA line " + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            throw Error(ErrorCode::MalformedInput, "QA line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (items.empty()) throw Error(ErrorCode::EmptyRecordSet, "QA set is empty");
    return items;
}

inline std::vector<QaItem> load_qa_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MalformedInput, "cannot open " + path);
    return parse_qa_jsonl(in);
}

enum class Judge { Keyword, Lm };

struct ItemResult {
    std::size_t index = 0;
    bool correct = false;
    std::vector<std::string> candidates;
    std::string answer_text;
    std::string error;
};

struct EvalReport {
    std::vector<ItemResult> items;

    std::size_t correct() const {
        return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [](const ItemResult& r) { return r.correct; }));
    }
    double accuracy() const { return items.empty() ? 0.0 : static_cast<double>(correct()) / static_cast<double>(items.size()); }
};

// Case-insensitive containment of every keyword.
inline bool keyword_match(const std::string& answer, const std::vector<std::string>& keywords) {
    const auto lower = [](std::string s) {
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        return s;
    };
    const std::string hay = lower(answer);
    return std::all_of(keywords.begin(), keywords.end(), [&](const std::string& k) { return hay.find(lower(k)) != std::string::npos; });
}

inline bool lm_judge(const SessionContext& ctx, const QaItem& item, const std::string& answer) {
    const std::string expected = item.expected_answer ? *item.expected_answer : [&] {
        std::string joined;
        for (const auto& k : item.expected_keywords) joined += (joined.empty() ? "" : ", ") + k;
        return joined;
    }();
    const auto reply = ctx.lm.complete(AgentRole::ReasoningAgent,
                                       ctx.templates.render("judge", {{"question", item.question},
                                                                      {"expected", expected},
                                                                      {"answer", answer}}));
    for (auto span : json_object_spans(reply.text)) {
        const auto doc = nlohmann::json::parse(span, nullptr, false);
        if (!doc.is_discarded() && doc.is_object() && doc.contains("correct") && doc.at("correct").is_boolean()) {
            return doc.at("correct").get<bool>();
        }
    }
    throw Error(ErrorCode::BackendUnavailable, "judge reply lacks {\"correct\": true|false}");
}

/// Runs every item as a full session and judges the final answer. Failing
/// items count as incorrect and carry their error text.
inline EvalReport run_eval(const std::vector<QaItem>& items, const SessionContext& ctx, Judge judge = Judge::Keyword,
                           const std::string& image_base_dir = {}) {
    EvalReport report;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& item = items[i];
        ItemResult result;
        result.index = i;
        try {
            std::optional<ImageRef> image;
            if (item.image) image = ImageRef::path(*item.image, image_base_dir);
            Session s = Session::start("eval-" + std::to_string(i + 1), {item.question, image}, ctx);
            for (const auto& c : s.candidates().entries) result.candidates.push_back(c.condition_id);
            std::vector<UserResponse> responses;
            for (std::size_t q = 0; q < s.questions().size(); ++q) {
                std::optional<std::string> answer;
                if (q < item.answers.size()) answer = item.answers[q];
                responses.push_back({s.questions()[q].id, answer, 0});
            }
            s.submit_answers(std::move(responses), ctx);
            result.answer_text = s.answer_text();
            if (judge == Judge::Keyword) {
                std::vector<std::string> keywords = item.expected_keywords;
                if (keywords.empty()) keywords.push_back(*item.expected_answer);
                result.correct = keyword_match(result.answer_text, keywords);
            } else {
                result.correct = lm_judge(ctx, item, result.answer_text);
            }
        } catch (const Error& e) {
            result.error = e.what();
        }
        report.items.push_back(std::move(result));
    }
    return report;
}

struct SweepRow {
    double lambda = 0.0;
    EvalReport report;
};

/// Accuracy per lambda. `make_lm` is called once per lambda so stateful
/// scripted backends start fresh each time.
inline std::vector<SweepRow> sweep_lambda(const std::vector<double>& lambdas, const std::vector<QaItem>& items,
                                          const ConditionGraph& graph, const EncoderClient& encoder,
                                          const std::function<LmClient()>& make_lm, const TemplateRegistry& templates,
                                          SessionConfig base, Judge judge = Judge::Keyword,
                                          const std::string& image_base_dir = {}) {
    for (double l : lambdas) check_lambda(l);
    std::vector<SweepRow> rows;
    for (double l : lambdas) {
        SessionConfig config = base;
        config.retrieval.lambda = l;
        const LmClient lm = make_lm();
        const SessionContext ctx{graph, encoder, lm, templates, config, logical_clock()};
        rows.push_back({l, run_eval(items, ctx, judge, image_base_dir)});
    }
    return rows;
}

}  // namespace medgrim
