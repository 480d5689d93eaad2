#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "medgrim/error.hpp"
#include "medgrim/graph.hpp"
#include "medgrim/lm_client.hpp"
#include "medgrim/retrieval.hpp"

namespace medgrim {

// Placeholders are {name} with name in [A-Za-z0-9_]; {{ and }} produce literal braces.
struct PromptTemplate {
    std::string id;
    AgentRole role = AgentRole::InteractionAgent;
    std::string body;

    std::set<std::string> required_placeholders() const {
        std::set<std::string> names;
        scan([&](std::string_view name) { names.emplace(name); }, [](char) {});
        return names;
    }

    std::string render(const std::map<std::string, std::string>& bindings) const {
        std::string out;
        out.reserve(body.size());
        scan(
            [&](std::string_view name) {
                auto it = bindings.find(std::string(name));
                if (it == bindings.end()) {
                    throw Error(ErrorCode::MissingPlaceholder,
                                "template '" + id + "' needs a value for {" + std::string(name) + "}");
                }
                out += it->second;
            },
            [&](char c) { out.push_back(c); });
        return out;
    }

private:
    template <class OnName, class OnChar>
    void scan(OnName&& on_name, OnChar&& on_char) const {
        const auto is_name_char = [](char c) {
            return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_';
        };
        for (std::size_t i = 0; i < body.size(); ++i) {
            const char c = body[i];
            if ((c == '{' || c == '}') && i + 1 < body.size() && body[i + 1] == c) {
                on_char(c);
                ++i;
                continue;
            }
            if (c == '{') {
                std::size_t j = i + 1;
                while (j < body.size() && is_name_char(body[j])) ++j;
                if (j < body.size() && body[j] == '}' && j > i + 1) {
                    on_name(std::string_view(body).substr(i + 1, j - i - 1));
                    i = j;
                    continue;
                }
            }
            on_char(c);
        }
    }
};

namespace templates {

inline constexpr std::string_view kQuestion = R"(You are a dermatology triage assistant preparing follow-up questions for a patient.

Patient description:
{user_description}

Candidate conditions retrieved from the knowledge graph:
{conditions}

Write exactly {question_count} short questions that help tell these candidate conditions apart.
- Base every question on the symptoms and causes listed above.
- Each question must be answerable with yes, no, or a few words.
- Ask about one observable feature per question (location, appearance, duration, triggers, sensations).
Reply with a JSON array of {question_count} strings and nothing else, for example ["Question one?", "Question two?"].)";

inline constexpr std::string_view kQuestionReask = R"({original_prompt}

Your previous reply could not be read. Reply with only a JSON array of question strings, starting with [ and ending with ].)";

inline constexpr std::string_view kLikelihood = R"(You are a medical reasoning assistant estimating how likely one skin condition explains a patient's presentation.

Condition under review:
{condition_block}

Retrieval similarity between the patient's input and this condition: {score} (range -1 to 1, higher means closer).

Patient description:
{user_description}

Follow-up questions and the patient's answers:
{qa_transcript}

Weigh the listed symptoms of {condition_name} against the description and answers. Treat "no answer given" as missing evidence.
Reply with one JSON object and nothing else: {{"likelihood": <integer 0-100>, "rationale": "<one or two sentences citing the answers that decided it>"}})";

inline constexpr std::string_view kLikelihoodReask = R"({original_prompt}

Your previous reply could not be read. Reply with only the JSON object {{"likelihood": <integer 0-100>, "rationale": "<text>"}}.)";

inline constexpr std::string_view kAnswer = R"(You are a dermatology assistant explaining a likely diagnosis to a patient.

Patient description:
{user_description}

Follow-up questions and the patient's answers:
{qa_transcript}

Conditions that remain likely, with their reference information:
{conditions}

Write the answer using only the reference information above.
1. For each condition, in the order given, explain in two or three sentences which of the patient's details match it.
2. Summarize the treatments and home care listed for the most likely condition as bullet points.
3. Finish with clear guidance on when to see a pharmacist, GP or urgent care.)";

inline constexpr std::string_view kAnswerLowConfidence = R"(You are a dermatology assistant. None of the candidate conditions was confirmed by the patient's answers, so the best retrieval match below is only a tentative lead.

Patient description:
{user_description}

Follow-up questions and the patient's answers:
{qa_transcript}

Closest match from the knowledge graph:
{conditions}

Using only the reference information above, describe this condition briefly, state plainly that the match is uncertain, and recommend that the patient has the skin checked by a pharmacist or GP.)";

inline constexpr std::string_view kAnswerEmpty = R"(You are a dermatology assistant. The knowledge graph returned no condition that fits the patient's input.

Patient description:
{user_description}

Follow-up questions and the patient's answers:
{qa_transcript}

Ask the patient for more detail: where on the body the change is, what it looks like, how long it has been there and whether it itches or hurts. Recommend seeing a pharmacist or GP if it is spreading, painful or not improving.)";

inline constexpr std::string_view kAnswerPlain = R"(Patient description:
{user_description}

Follow-up questions and the patient's answers:
{qa_transcript}

Reference information:
{conditions})";

inline constexpr std::string_view kFollowUp = R"(You are a dermatology assistant continuing a conversation with a patient.

Reference information on the conditions discussed:
{conditions}

Conversation so far:
{transcript}

Patient's new message:
{message}

Answer the new message directly in a short paragraph, using only the reference information and the conversation above. If the reference information does not cover the question, say so and suggest asking a pharmacist or GP.)";

inline constexpr std::string_view kJudge = R"(You are grading an answer against a reference.

Question:
{question}

Reference answer:
{expected}

Answer to grade:
{answer}

Reply with one JSON object and nothing else: {{"correct": true}} if the answer reaches the same conclusion as the reference, otherwise {{"correct": false}}.)";

}  // namespace templates

/// Immutable once loaded. Built-in defaults can be replaced by `<id>.txt`
/// files from a templates directory.
class TemplateRegistry {
public:
    static TemplateRegistry defaults() {
        TemplateRegistry r;
        r.add({"question", AgentRole::QuestionAgent, std::string(templates::kQuestion)});
        r.add({"question_reask", AgentRole::QuestionAgent, std::string(templates::kQuestionReask)});
        r.add({"likelihood", AgentRole::ReasoningAgent, std::string(templates::kLikelihood)});
        r.add({"likelihood_reask", AgentRole::ReasoningAgent, std::string(templates::kLikelihoodReask)});
        r.add({"answer", AgentRole::InteractionAgent, std::string(templates::kAnswer)});
        r.add({"answer_low_confidence", AgentRole::InteractionAgent, std::string(templates::kAnswerLowConfidence)});
        r.add({"answer_empty", AgentRole::InteractionAgent, std::string(templates::kAnswerEmpty)});
        r.add({"answer_plain", AgentRole::InteractionAgent, std::string(templates::kAnswerPlain)});
        r.add({"follow_up", AgentRole::InteractionAgent, std::string(templates::kFollowUp)});
        r.add({"judge", AgentRole::ReasoningAgent, std::string(templates::kJudge)});
        return r;
    }

    /// Defaults overridden by every `<id>.txt` in `dir`. Files naming an
    /// unknown template id are rejected.
    static TemplateRegistry load(const std::filesystem::path& dir) {
        TemplateRegistry r = defaults();
        if (!std::filesystem::is_directory(dir)) {
            throw Error(ErrorCode::InvalidArgument, "template directory " + dir.string() + " does not exist");
        }
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& path : files) {
            const std::string id = path.stem().string();
            auto it = r.templates_.find(id);
            if (it == r.templates_.end()) throw Error(ErrorCode::UnknownTemplate, "no template named '" + id + "'");
            std::ifstream in(path, std::ios::binary);
            it->second.body.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        }
        return r;
    }

    const PromptTemplate& get(const std::string& id) const {
        auto it = templates_.find(id);
        if (it == templates_.end()) throw Error(ErrorCode::UnknownTemplate, "no template named '" + id + "'");
        return it->second;
    }

    std::string render(const std::string& id, const std::map<std::string, std::string>& bindings) const {
        return get(id).render(bindings);
    }

    void add(PromptTemplate t) { templates_.insert_or_assign(t.id, std::move(t)); }

private:
    std::map<std::string, PromptTemplate> templates_;
};

// ---------------------------------------------------------------------------
// Retrieved context

struct ConditionBundle {
    std::string id;
    std::string name;
    std::string definition;
    std::string symptoms;
    std::string treatments;
    std::string prevention;
    double score = 0.0;
};

struct QaPair {
    std::string question;
    // Unset when the user skipped the question.
    std::optional<std::string> answer;
};

struct RetrievedContext {
    std::string user_description;
    std::vector<QaPair> qa;
};

inline std::string format_score(double score) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", score);
    return buf;
}

inline ConditionBundle make_bundle(const ConditionGraph& graph, const ScoredCondition& sc) {
    const auto& node = graph.node(sc.condition_id);
    return {node.id,
            node.name,
            node.definition,
            graph.info(node, InfoCategory::Symptoms).body,
            graph.info(node, InfoCategory::Treatments).body,
            graph.info(node, InfoCategory::Prevention).body,
            sc.score};
}

// Score descending, then id ascending.
inline std::vector<ConditionBundle> make_bundles(const ConditionGraph& graph, const std::vector<ScoredCondition>& entries) {
    std::vector<ConditionBundle> out;
    for (const auto& e : entries) out.push_back(make_bundle(graph, e));
    std::stable_sort(out.begin(), out.end(), [](const ConditionBundle& a, const ConditionBundle& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    return out;
}

inline std::string format_qa(const std::vector<QaPair>& qa) {
    if (qa.empty()) return "(no follow-up questions were asked)";
    std::string out;
    for (std::size_t i = 0; i < qa.size(); ++i) {
        const auto n = std::to_string(i + 1);
        out += "Q" + n + ": " + qa[i].question + "\nA" + n + ": " + (qa[i].answer ? *qa[i].answer : "no answer given");
        if (i + 1 < qa.size()) out += "\n";
    }
    return out;
}

enum class BundleDetail { SymptomsOnly, Full };

inline std::string format_bundle(const ConditionBundle& b, BundleDetail detail, bool with_score) {
    std::string out = "### " + b.name;
    if (with_score) out += " (similarity " + format_score(b.score) + ")";
    out += "\nDefinition: " + b.definition + "\nSymptoms: " + b.symptoms;
    if (detail == BundleDetail::Full) out += "\nTreatments: " + b.treatments + "\nPrevention: " + b.prevention;
    return out;
}

inline std::string format_bundles(std::vector<ConditionBundle> bundles, BundleDetail detail, bool with_score) {
    std::stable_sort(bundles.begin(), bundles.end(), [](const ConditionBundle& a, const ConditionBundle& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    std::string out;
    for (std::size_t i = 0; i < bundles.size(); ++i) {
        if (i) out += "\n\n";
        out += format_bundle(bundles[i], detail, with_score);
    }
    return out;
}

inline std::string build_question_prompt(const TemplateRegistry& reg, const std::vector<ConditionBundle>& candidates,
                                         const RetrievedContext& context, int question_count = 3) {
    if (candidates.empty()) throw Error(ErrorCode::EmptyCandidates, "question prompt needs at least one candidate");
    return reg.render("question", {{"user_description", context.user_description},
                                   {"conditions", format_bundles(candidates, BundleDetail::SymptomsOnly, false)},
                                   {"question_count", std::to_string(question_count)}});
}

inline std::string build_likelihood_prompt(const TemplateRegistry& reg, const ConditionBundle& condition,
                                           const RetrievedContext& context, double score) {
    return reg.render("likelihood", {{"condition_name", condition.name},
                                     {"condition_block", format_bundle(condition, BundleDetail::SymptomsOnly, false)},
                                     {"score", format_score(score)},
                                     {"user_description", context.user_description},
                                     {"qa_transcript", format_qa(context.qa)}});
}

enum class AnswerMode { Confirmed, LowConfidence };

/// Answer prompt over the conditions that survived filtering. With no
/// conditions the prompt asks the user for more detail instead.
inline std::string build_answer_prompt(const TemplateRegistry& reg, const std::vector<ConditionBundle>& filtered,
                                       const RetrievedContext& context, AnswerMode mode = AnswerMode::Confirmed,
                                       bool prompt_engineering = true) {
    std::map<std::string, std::string> bindings{{"user_description", context.user_description},
                                                {"qa_transcript", format_qa(context.qa)}};
    if (filtered.empty()) return reg.render("answer_empty", bindings);
    bindings["conditions"] = format_bundles(filtered, BundleDetail::Full, false);
    if (!prompt_engineering) return reg.render("answer_plain", bindings);
    return reg.render(mode == AnswerMode::Confirmed ? "answer" : "answer_low_confidence", bindings);
}

inline std::string build_follow_up_prompt(const TemplateRegistry& reg, const std::vector<ConditionBundle>& conditions,
                                          const std::string& conversation, const std::string& message) {
    return reg.render("follow_up", {{"conditions", conditions.empty()
                                                       ? std::string("(no conditions were identified)")
                                                       : format_bundles(conditions, BundleDetail::Full, false)},
                                    {"transcript", conversation},
                                    {"message", message}});
}

}  // namespace medgrim
