// medgrim: ingest condition datasets, run diagnostic sessions in the terminal,
// evaluate QA sets, sweep lambda and serve the HTTP API.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "medgrim/eval.hpp"
#include "medgrim/factory.hpp"
#include "medgrim/persist.hpp"
#include "medgrim/service.hpp"
#include "medgrim/session.hpp"

namespace {

using namespace medgrim;

// Exit codes are part of the CLI contract.
constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitEncoder = 3;
constexpr int kExitBackend = 4;

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::EncoderUnavailable:
        case ErrorCode::DimensionMismatch: return kExitEncoder;
        case ErrorCode::BackendUnavailable:
        case ErrorCode::ScriptExhausted:
        case ErrorCode::ContextOverflow:
        case ErrorCode::UnparseableLikelihood:
        case ErrorCode::UnparseableQuestions: return kExitBackend;
        case ErrorCode::InvalidArgument:
        case ErrorCode::InvalidLambda:
        case ErrorCode::InvalidQuery:
        case ErrorCode::MalformedInput:
        case ErrorCode::EmptyRecordSet:
        case ErrorCode::DuplicateConditionName:
        case ErrorCode::CorruptPayload:
        case ErrorCode::SchemaVersionMismatch:
        case ErrorCode::UnknownTemplate:
        case ErrorCode::IncompleteAnswers: return kExitValidation;
        default: return kExitFailure;
    }
}

std::string fmt(const char* format, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, format, v);
    return buf;
}

struct PipelineOptions {
    std::string graph_path;
    std::string encoder;
    std::string scripted;
    std::string templates;
    double lambda = 0.4;
    double relative_threshold = 0.95;
    double likelihood_threshold = 0.5;
    int question_count = 3;
    bool no_prompt_engineering = false;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--graph", graph_path, "Graph file written by ingest")->required();
        cmd->add_option("--encoder", encoder, "Encoder spec; defaults to the one recorded in the graph");
        cmd->add_option("--scripted", scripted, "Scripted LM backend file (JSON); otherwise MEDGRIM_<ROLE>_URL endpoints");
        cmd->add_option("--templates", templates, "Directory of <id>.txt prompt template overrides");
        cmd->add_option("--lambda", lambda, "Text weight of the hybrid score");
        cmd->add_option("--relative-threshold", relative_threshold, "Stage-1 fraction of the best score");
        cmd->add_option("--likelihood-threshold", likelihood_threshold, "Stage-2 likelihood cut (strict >)");
        cmd->add_option("--questions", question_count, "Clarifying questions per session (1-8)");
        cmd->add_flag("--no-prompt-engineering", no_prompt_engineering, "Use the plain answer template");
    }

    SessionConfig session_config() const {
        SessionConfig c;
        c.retrieval.lambda = lambda;
        c.retrieval.relative_threshold = relative_threshold;
        c.likelihood_threshold = likelihood_threshold;
        c.question_count = question_count;
        c.prompt_engineering = !no_prompt_engineering;
        c.validate();
        return c;
    }

    std::shared_ptr<EncoderClient> make_encoder_for(const ConditionGraph& graph) const {
        std::string spec = encoder;
        if (spec.empty()) {
            auto it = graph.metadata().find("encoder");
            if (it == graph.metadata().end()) {
                throw Error(ErrorCode::InvalidArgument, "graph records no encoder; pass --encoder");
            }
            spec = it->second;
        }
        auto enc = make_encoder(spec, graph.dimension());
        if (enc->dimension() != 0 && enc->dimension() != graph.dimension()) {
            throw Error(ErrorCode::DimensionMismatch, "encoder dimension " + std::to_string(enc->dimension()) +
                                                          " does not match graph dimension " +
                                                          std::to_string(graph.dimension()));
        }
        return enc;
    }

    LmClient make_lm() const {
        std::optional<std::string> path;
        if (!scripted.empty()) path = scripted;
        return make_lm_client(path, ApiConfig::from_env().lm);
    }

    TemplateRegistry make_templates() const {
        return templates.empty() ? TemplateRegistry::defaults() : TemplateRegistry::load(templates);
    }
};

int run_ingest(const std::string& csv, const std::string& encoder_spec, double threshold, std::size_t top_k,
               const std::string& out) {
    auto records = load_condition_csv(csv);
    auto encoder = make_encoder(encoder_spec);
    IngestOptions opts;
    opts.edge_policy.threshold = threshold;
    if (top_k > 0) opts.edge_policy.top_k = top_k;
    opts.image_base_dir = std::filesystem::path(csv).parent_path().string();
    opts.metadata["encoder"] = encoder_spec;
    const ConditionGraph graph = ingest(records, *encoder, opts);
    save_file(graph, out);
    std::cout << "conditions: " << graph.size() << "\n"
              << "info_nodes: " << graph.info_nodes().size() << "\n"
              << "edges: " << graph.edges().size() << "\n"
              << "dimension: " << graph.dimension() << "\n";
    return kExitOk;
}

void print_candidates(const ConditionGraph& graph, const CandidateSet& candidates) {
    std::cout << "Candidates:\n";
    for (const auto& c : candidates.entries) {
        std::cout << "  " << fmt("%.3f", c.score) << "  " << graph.node(c.condition_id).name << " ["
                  << to_string(c.via) << "]\n";
    }
}

int run_query(const PipelineOptions& p, const std::string& text, const std::string& image,
              const std::string& transcript_out) {
    const SessionConfig config = p.session_config();
    const ConditionGraph graph = load_file(p.graph_path);
    const auto encoder = p.make_encoder_for(graph);
    const LmClient lm = p.make_lm();
    const TemplateRegistry templates = p.make_templates();
    const SessionContext ctx{graph, *encoder, lm, templates, config,
                             p.scripted.empty() ? system_clock_ms() : logical_clock()};

    std::optional<ImageRef> img;
    if (!image.empty()) img = ImageRef::path(image);
    Session session = Session::start("cli-1", {text, img}, ctx);
    const auto save_transcript = [&] {
        if (transcript_out.empty()) return;
        std::ofstream out(transcript_out, std::ios::trunc);
        out << session.to_json().dump(2) << "\n";
    };

    print_candidates(graph, session.candidates());
    std::vector<UserResponse> responses;
    if (!session.questions().empty()) {
        std::cout << "Questions (blank line skips):\n";
        for (const auto& q : session.questions()) {
            std::cout << "  " << q.id << ": " << q.text << "\n> " << std::flush;
            std::string line;
            std::optional<std::string> answer;
            if (std::getline(std::cin, line) && !trim(line).empty()) answer = trim(line);
            responses.push_back({q.id, answer, 0});
        }
    }
    try {
        session.submit_answers(std::move(responses), ctx);
    } catch (...) {
        save_transcript();
        throw;
    }
    if (!session.verdicts().empty()) {
        std::cout << "Likelihoods:\n";
        for (const auto& v : session.verdicts()) {
            std::cout << "  " << fmt("%5.1f%%", 100.0 * v.likelihood) << "  " << graph.node(v.condition_id).name
                      << (v.kept ? "" : " (ruled out)") << "\n";
        }
    }
    std::cout << "Answer:\n" << session.answer_text() << "\n";
    std::string line;
    while (std::cout << "> " << std::flush, std::getline(std::cin, line)) {
        if (trim(line) == "/quit") break;
        if (trim(line).empty()) continue;
        std::cout << session.follow_up(line, ctx) << "\n";
    }
    std::cout << "\n";
    session.close(ctx);
    save_transcript();
    return kExitOk;
}

void print_report(const EvalReport& report, const std::vector<QaItem>& items) {
    for (const auto& r : report.items) {
        std::cout << "item " << (r.index + 1) << ": " << (r.correct ? "PASS" : "FAIL") << "  "
                  << items[r.index].question.substr(0, 60);
        if (!r.error.empty()) std::cout << "  error: " << r.error;
        std::cout << "\n";
    }
    std::cout << "accuracy: " << fmt("%.4f", report.accuracy()) << " (" << report.correct() << "/"
              << report.items.size() << ")\n";
}

Judge parse_judge(const std::string& s) {
    if (s == "keyword") return Judge::Keyword;
    if (s == "lm") return Judge::Lm;
    throw Error(ErrorCode::InvalidArgument, "judge must be 'keyword' or 'lm'");
}

int run_eval_cmd(const PipelineOptions& p, const std::string& qa_path, const std::string& judge) {
    const SessionConfig config = p.session_config();
    const Judge j = parse_judge(judge);
    const auto items = load_qa_jsonl(qa_path);
    const ConditionGraph graph = load_file(p.graph_path);
    const auto encoder = p.make_encoder_for(graph);
    const LmClient lm = p.make_lm();
    const TemplateRegistry templates = p.make_templates();
    const SessionContext ctx{graph, *encoder, lm, templates, config, logical_clock()};
    const auto report = run_eval(items, ctx, j, std::filesystem::path(qa_path).parent_path().string());
    print_report(report, items);
    return kExitOk;
}

std::vector<double> parse_values(const std::string& list) {
    std::vector<double> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::InvalidArgument, "not a number in --values: '" + item + "'");
        }
    }
    if (out.empty()) throw Error(ErrorCode::InvalidArgument, "--values is empty");
    for (double v : out) check_lambda(v);
    return out;
}

int run_sweep(const PipelineOptions& p, const std::string& qa_path, const std::string& values, const std::string& judge) {
    const auto lambdas = parse_values(values);
    const SessionConfig config = p.session_config();
    const Judge j = parse_judge(judge);
    const auto items = load_qa_jsonl(qa_path);
    const ConditionGraph graph = load_file(p.graph_path);
    const auto encoder = p.make_encoder_for(graph);
    const TemplateRegistry templates = p.make_templates();
    const auto rows = sweep_lambda(lambdas, items, graph, *encoder, [&] { return p.make_lm(); }, templates, config, j,
                                   std::filesystem::path(qa_path).parent_path().string());
    std::cout << "lambda\taccuracy\tcorrect\n";
    const SweepRow* best = nullptr;
    for (const auto& row : rows) {
        std::cout << fmt("%.2f", row.lambda) << "\t" << fmt("%.4f", row.report.accuracy()) << "\t"
                  << row.report.correct() << "/" << row.report.items.size() << "\n";
        if (!best || row.report.accuracy() > best->report.accuracy()) best = &row;
    }
    std::cout << "best lambda: " << fmt("%.2f", best->lambda) << "\n";
    return kExitOk;
}

int run_serve(ApiConfig config) {
    auto service = make_service(config);
    httplib::Server server;
    service->bind(server);
    std::cerr << "listening on " << config.host << ":" << config.port << "\n";
    if (!server.listen(config.host, config.port)) {
        throw Error(ErrorCode::InvalidArgument, "cannot listen on " + config.host + ":" + std::to_string(config.port));
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Graph-RAG diagnostic engine: retrieval over a condition graph with clarifying dialogue"};
    app.require_subcommand(1);

    std::string csv, encoder = "test:0", out;
    double edge_threshold = 0.8;
    std::size_t top_k = 0;
    auto* ingest_cmd = app.add_subcommand("ingest", "Build a graph file from a condition CSV");
    ingest_cmd->add_option("--csv", csv, "Condition CSV")->required();
    ingest_cmd->add_option("--encoder", encoder, "test:SEED[:DIM] | table:PATH | http(s)://URL");
    ingest_cmd->add_option("--edge-threshold", edge_threshold, "Text cosine needed for a similarity edge");
    ingest_cmd->add_option("--top-k", top_k, "Link each condition to its k most similar instead (0 = off)");
    ingest_cmd->add_option("--out", out, "Output graph file")->required();

    PipelineOptions query_opts;
    std::string text, image, transcript_out;
    auto* query_cmd = app.add_subcommand("query", "Interactive diagnostic session on the terminal");
    query_opts.add_to(query_cmd);
    query_cmd->add_option("--text", text, "Description of the skin problem")->required();
    query_cmd->add_option("--image", image, "Optional image file");
    query_cmd->add_option("--transcript-out", transcript_out, "Write the session log (JSON) here");

    PipelineOptions eval_opts;
    std::string qa, judge = "keyword";
    auto* eval_cmd = app.add_subcommand("eval", "Run a QA JSONL set and report accuracy");
    eval_opts.add_to(eval_cmd);
    eval_cmd->add_option("--qa", qa, "QA JSONL file")->required();
    eval_cmd->add_option("--judge", judge, "keyword | lm");

    PipelineOptions sweep_opts;
    std::string sweep_qa, values = "0.2,0.4,0.5,0.7,0.9", sweep_judge = "keyword";
    auto* sweep_cmd = app.add_subcommand("sweep-lambda", "Accuracy for each lambda value");
    sweep_opts.add_to(sweep_cmd);
    sweep_cmd->add_option("--qa", sweep_qa, "QA JSONL file")->required();
    sweep_cmd->add_option("--values", values, "Comma-separated lambda values");
    sweep_cmd->add_option("--judge", sweep_judge, "keyword | lm");

    ApiConfig serve_config;
    auto* serve_cmd = app.add_subcommand("serve", "Serve the /v1 HTTP API (settings from MEDGRIM_* env, flags override)");
    std::string serve_graph, serve_host, serve_scripted, serve_encoder, serve_templates, serve_sessions;
    int serve_port = -1;
    bool serve_debug = false;
    serve_cmd->add_option("--graph", serve_graph, "Graph file");
    serve_cmd->add_option("--host", serve_host, "Bind address");
    serve_cmd->add_option("--port", serve_port, "Port");
    serve_cmd->add_option("--scripted", serve_scripted, "Scripted LM backend file");
    serve_cmd->add_option("--encoder", serve_encoder, "Encoder spec");
    serve_cmd->add_option("--templates", serve_templates, "Prompt template directory");
    serve_cmd->add_option("--session-dir", serve_sessions, "Directory for session logs");
    serve_cmd->add_flag("--debug", serve_debug, "Include prompts in transcript responses");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*ingest_cmd) return run_ingest(csv, encoder, edge_threshold, top_k, out);
        if (*query_cmd) return run_query(query_opts, text, image, transcript_out);
        if (*eval_cmd) return run_eval_cmd(eval_opts, qa, judge);
        if (*sweep_cmd) return run_sweep(sweep_opts, sweep_qa, values, sweep_judge);
        if (*serve_cmd) {
            serve_config = ApiConfig::from_env();
            if (!serve_graph.empty()) serve_config.graph_path = serve_graph;
            if (!serve_host.empty()) serve_config.host = serve_host;
            if (serve_port >= 0) serve_config.port = serve_port;
            if (!serve_scripted.empty()) serve_config.scripted_path = serve_scripted;
            if (!serve_encoder.empty()) serve_config.encoder = serve_encoder;
            if (!serve_templates.empty()) serve_config.template_dir = serve_templates;
            if (!serve_sessions.empty()) serve_config.session_dir = serve_sessions;
            if (serve_debug) serve_config.debug = true;
            return run_serve(serve_config);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}
