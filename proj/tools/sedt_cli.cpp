// Command-line front end: generate-data, train, eval, predict, sweep.

#include "sedt/runner.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace sedt;

namespace {

std::vector<FusionStrategy> parse_fusions(const std::vector<std::string>& names) {
    std::vector<FusionStrategy> out;
    for (const auto& n : names) {
        if (n == "all") {
            out = {FusionStrategy::kNone, FusionStrategy::kDelete, FusionStrategy::kDeleteAndForce, FusionStrategy::kForce};
            return out;
        }
        out.push_back(fusion_from_string(n));
    }
    return out;
}

std::optional<double> parse_alpha(const std::string& s) {
    if (s == "all") return std::nullopt;
    return std::stod(s);
}

double parse_epsilon(const std::string& s) {
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    return std::stod(s);
}

Dataset load_for_checkpoint(const fs::path& manifest, const Checkpoint& ck) {
    auto d = load_dataset(manifest, &ck.vocab, ck.config.features);
    normalize_dataset(d, ck.norm);
    return d;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
}

int run_generate(const std::string& spec_path, const fs::path& out, std::size_t num_clips, std::uint64_t seed,
                 std::size_t weak, std::uint64_t first) {
    auto spec = spec_path.empty() ? SyntheticSceneSpec::defaults(seed) : SyntheticSceneSpec::from_json_file(spec_path);
    spec.seed = seed;
    FeatureConfig fc;
    fc.sample_rate = spec.sample_rate;
    const auto manifest = write_synthetic_dataset(spec, out, first, num_clips, fc, weak);
    write_text(out / "scene_spec.json", spec.to_json());
    std::cout << "wrote " << num_clips << " clips to " << manifest.string() << "\n";
    return 0;
}

int run_train(const fs::path& config_path, const std::string& stage_name, const std::string& from, const fs::path& out,
              bool quiet) {
    const auto cfg = TrainConfig::from_file(config_path);
    const Stage stage = stage_from_string(stage_name);
    if (cfg.train_manifest.empty()) throw ValidationError("config has no train_manifest");

    std::optional<Checkpoint> start;
    if (!from.empty()) start = Checkpoint::load(from);
    if (stage == Stage::kFinetune && !start) throw ValidationError("the finetune stage needs --from <learning checkpoint>");

    const LabelVocabulary* vocab = start ? &start->vocab : nullptr;
    auto train = load_dataset(cfg.train_manifest, vocab, cfg.features);
    const NormStats norm = start ? start->norm : dataset_norm_stats(train);
    normalize_dataset(train, norm);
    std::optional<Dataset> valid;
    if (!cfg.valid_manifest.empty()) {
        valid = load_dataset(cfg.valid_manifest, &train.vocab, cfg.features);
        normalize_dataset(*valid, norm);
    }
    if (!start) start = initial_checkpoint(cfg, train.vocab, norm);

    fs::create_directories(out);
    write_text(out / "config.json", cfg.to_json());
    std::ofstream log(out / "train_log.jsonl", start->stage == stage ? std::ios::app : std::ios::trunc);
    TrainHooks hooks;
    hooks.on_step = [&](const StepRecord& r) { log << r.to_json() << "\n"; };
    hooks.on_epoch = [&](const EpochRecord& e) {
        log.flush();
        if (quiet) return;
        std::cout << to_string(e.stage) << " epoch " << e.epoch + 1 << " loss " << e.mean_loss;
        if (e.valid_eb) std::cout << " valid Eb " << *e.valid_eb;
        std::cout << std::endl;
    };
    hooks.on_checkpoint = [&](const Checkpoint& c) { c.save(out / "last"); };
    const auto result = train_stage(stage, cfg, *start, train, valid ? &*valid : nullptr, hooks);
    result.best.save(out / "best");
    result.last.save(out / "last");
    std::cout << "best epoch " << result.best.best_epoch + 1 << " (valid Eb " << result.best.best_metric << ")\n";
    return 0;
}

int run_eval(const fs::path& ckpt, const fs::path& manifest, const std::vector<std::string>& fusion,
             const std::string& report) {
    const auto ck = Checkpoint::load(ckpt);
    const auto d = load_for_checkpoint(manifest, ck);
    const auto reports = evaluate(ck.model(), d, ck.config.decision, parse_fusions(fusion));
    std::cout << report_to_table(reports);
    if (!report.empty()) write_text(report, report_to_json(reports) + "\n");
    return 0;
}

int run_predict(const fs::path& ckpt, const fs::path& input, const std::string& fusion, const fs::path& out) {
    const auto ck = Checkpoint::load(ckpt);
    DecisionConfig decision = ck.config.decision;
    decision.fusion = fusion_from_string(fusion);
    const auto model = ck.model();
    std::ostringstream lines;
    auto emit = [&](const std::string& id, const LogMelSpectrogram& spec, double clip_len) {
        const auto pred = model.predict(normalize(spec, ck.norm).values);
        lines << prediction_to_json_line(id, postprocess(pred, clip_len, decision), pred.tag_probs, ck.vocab) << "\n";
    };
    if (input.extension() == ".wav") {
        const auto wav = read_wav(input);
        const auto spec = log_mel(wav, ck.config.features);
        emit(input.stem().string(), spec, spec.clip_len_s);
    } else {
        const auto d = load_dataset(input, &ck.vocab, ck.config.features);
        for (const auto& e : d.examples) emit(e.annotation.clip_id, e.features, e.annotation.clip_len_s);
    }
    write_text(out, lines.str());
    return 0;
}

int run_sweep(const fs::path& ckpt, const std::vector<std::string>& eps, const std::vector<std::string>& alphas,
              const std::vector<std::string>& fusion, std::string train_manifest, std::string eval_manifest,
              const fs::path& out) {
    const auto ck = Checkpoint::load(ckpt);
    if (train_manifest.empty()) train_manifest = ck.config.train_manifest;
    if (eval_manifest.empty()) eval_manifest = ck.config.valid_manifest;
    if (train_manifest.empty() || eval_manifest.empty()) {
        throw ValidationError("sweep needs --train-manifest and --eval-manifest (or a config that names them)");
    }
    const auto train = load_for_checkpoint(train_manifest, ck);
    const auto evalset = load_for_checkpoint(eval_manifest, ck);
    std::vector<double> e;
    for (const auto& s : eps) e.push_back(parse_epsilon(s));
    std::vector<std::optional<double>> a;
    for (const auto& s : alphas) a.push_back(parse_alpha(s));
    const auto rows = sweep(ck, e, a, parse_fusions(fusion), train, evalset);
    const auto csv = sweep_to_csv(rows);
    write_text(out, csv);
    std::cout << csv;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sound event detection transformer"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate-data", "Render a synthetic soundscape dataset");
    std::string spec_path;
    fs::path gen_out;
    std::size_t num_clips = 100, weak = 0;
    std::uint64_t seed = 0, first = 0;
    gen->add_option("--spec", spec_path, "Scene spec JSON (default: built-in five-class spec)")->check(CLI::ExistingFile);
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--num-clips", num_clips, "Number of clips");
    gen->add_option("--seed", seed, "Scene seed");
    gen->add_option("--first-index", first, "Index of the first clip");
    gen->add_option("--weak", weak, "Number of leading clips to keep with weak labels only");

    auto* train = app.add_subcommand("train", "Run the learning or fine-tuning stage");
    fs::path config, train_out;
    std::string stage = "learning", from;
    bool quiet = false;
    train->add_option("--config", config, "Flat JSON training config")->required()->check(CLI::ExistingFile);
    train->add_option("--stage", stage, "learning | finetune")->check(CLI::IsMember({"learning", "finetune"}));
    train->add_option("--from", from, "Checkpoint directory to resume or fine-tune from");
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_flag("--quiet", quiet, "Suppress per-epoch progress");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    fs::path ckpt, manifest;
    std::vector<std::string> fusion{"none"};
    std::string report;
    ev->add_option("--ckpt", ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--manifest", manifest, "JSON-lines manifest")->required()->check(CLI::ExistingFile);
    ev->add_option("--fusion", fusion, "none | 1 | 2 | 3 | all (repeatable)");
    ev->add_option("--report", report, "Write the JSON report here");

    auto* pr = app.add_subcommand("predict", "Export decoded events as JSON lines");
    fs::path input, pred_out;
    std::string pred_fusion = "none";
    pr->add_option("--ckpt", ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    pr->add_option("--input", input, "A .wav file or a manifest")->required()->check(CLI::ExistingFile);
    pr->add_option("--out", pred_out, "Output JSON-lines file")->required();
    pr->add_option("--fusion", pred_fusion, "none | 1 | 2 | 3");

    auto* sw = app.add_subcommand("sweep", "Fine-tune over an (epsilon, alpha) grid");
    std::vector<std::string> epsilons, alphas, sweep_fusion{"none"};
    std::string train_manifest, eval_manifest;
    fs::path sweep_out;
    sw->add_option("--ckpt", ckpt, "Learning-stage checkpoint directory")->required()->check(CLI::ExistingDirectory);
    sw->add_option("--epsilons", epsilons, "Location cost thresholds (numbers, -inf or inf)");
    sw->add_option("--alphas", alphas, "Retention rates (numbers or all)");
    sw->add_option("--fusion", sweep_fusion, "none | 1 | 2 | 3 | all (repeatable)");
    sw->add_option("--train-manifest", train_manifest, "Fine-tuning data (default: the checkpoint config's)");
    sw->add_option("--eval-manifest", eval_manifest, "Evaluation data (default: the checkpoint config's validation set)");
    sw->add_option("--out", sweep_out, "Output CSV")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) return run_generate(spec_path, gen_out, num_clips, seed, weak, first);
        if (*train) return run_train(config, stage, from, train_out, quiet);
        if (*ev) return run_eval(ckpt, manifest, fusion, report);
        if (*pr) return run_predict(ckpt, input, pred_fusion, pred_out);
        if (*sw) return run_sweep(ckpt, epsilons, alphas, sweep_fusion, train_manifest, eval_manifest, sweep_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
