#include "storynizor/cli.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "storynizor/data.hpp"
#include "storynizor/diffusion.hpp"
#include "storynizor/eval.hpp"

namespace storynizor {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string collapse_spaces(const std::string& s) {
    std::istringstream in(s);
    std::string w, out;
    while (in >> w) out += (out.empty() ? "" : " ") + w;
    return out;
}

}  // namespace

StoryPrompt parse_prompts(const std::string& text) {
    StoryPrompt story;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::string clean;
        std::vector<std::string> descriptions, actions;
        size_t pos = 0;
        while (pos < t.size()) {
            const auto open = t.find('[', pos);
            const auto close_stray = t.find(']', pos);
            if (close_stray != std::string::npos && (open == std::string::npos || close_stray < open))
                throw UsageError("prompts line " + std::to_string(lineno) + ": ']' without '['");
            if (open == std::string::npos) {
                clean += t.substr(pos);
                if (!descriptions.empty()) actions.back() = collapse_spaces(t.substr(pos));
                break;
            }
            const auto close = t.find(']', open);
            if (close == std::string::npos)
                throw UsageError("prompts line " + std::to_string(lineno) + ": '[' without ']'");
            const auto desc = collapse_spaces(t.substr(open + 1, close - open - 1));
            if (desc.empty()) throw UsageError("prompts line " + std::to_string(lineno) + ": empty character marker");
            if (desc.find('[') != std::string::npos)
                throw UsageError("prompts line " + std::to_string(lineno) + ": nested '['");
            const std::string before = t.substr(pos, open - pos);
            clean += before;
            if (!descriptions.empty()) actions.back() = collapse_spaces(before);
            clean += " " + desc + " ";
            descriptions.push_back(desc);
            actions.emplace_back();
            pos = close + 1;
        }
        const auto full = collapse_spaces(clean);
        try {
            story.frames.push_back(make_frame_prompt(full, descriptions, actions));
        } catch (const std::exception& e) {
            throw UsageError("prompts line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (story.frames.empty()) throw UsageError("prompts file contains no frames");
    try {
        story.validate();
    } catch (const std::exception& e) {
        throw UsageError(std::string("prompts: ") + e.what());
    }
    return story;
}

StoryPrompt load_prompts_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open prompts file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_prompts(ss.str());
}

namespace {

struct ConfigFlags {
    std::string path;
    std::optional<double> alpha, dropout;
    bool no_amsa = false;

    void add(CLI::App* cmd) {
        cmd->add_option("--config", path, "model config JSON (defaults built in)")->check(CLI::ExistingFile);
        cmd->add_option("--alpha", alpha, "mask loss weight");
        cmd->add_option("--dropout", dropout, "text/face condition dropout probability");
        cmd->add_flag("--no-amsa", no_amsa, "per-frame self-attention instead of AMSA");
    }

    ModelConfig resolve() const {
        try {
            ModelConfig c = path.empty() ? ModelConfig{} : ModelConfig::load(path);
            if (alpha) c.mask_loss_weight = *alpha;
            if (dropout) c.condition_dropout = *dropout;
            if (no_amsa) c.use_amsa = false;
            c.validate();
            return c;
        } catch (const UsageError&) {
            throw;
        } catch (const std::exception& e) {
            throw UsageError(e.what());
        }
    }
};

Checkpoint open_checkpoint(const std::string& path) {
    if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
    return load_checkpoint(path);
}

std::vector<StoryGroup> load_groups(const std::string& root, int limit) {
    std::vector<std::string> dirs;
    try {
        dirs = list_groups(root);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    if (dirs.empty()) throw UsageError("no story groups under " + root);
    if (limit > 0 && static_cast<int>(dirs.size()) > limit) dirs.resize(static_cast<size_t>(limit));
    std::vector<StoryGroup> groups;
    for (const auto& d : dirs) groups.push_back(load_story_group(d));
    return groups;
}

void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << '\n';
}

struct GenData {
    std::string out;
    int groups = 10;
    int frames = 4;
    uint64_t seed = kDefaultSeed;
    bool force = false;

    int run(std::ostream& os) const {
        if (fs::exists(out) && !fs::is_empty(out)) {
            if (!force) throw UsageError(out + " is not empty; pass --force to regenerate");
            fs::remove_all(out);
        }
        const auto s = generate_dataset(out, groups, frames, seed);
        os << "groups " << s.groups << "  images " << s.images << "  masks " << s.masks << "  identities "
           << s.identities << '\n';
        return kExitOk;
    }
};

struct Train {
    ConfigFlags config;
    std::string data, out, stage = "synchronizer", sync_checkpoint, base_checkpoint, resume;
    int steps = 100, checkpoint_every = 0, mask_every = 0, limit = 0;
    uint64_t seed = kDefaultSeed;
    std::optional<double> lr;
    bool stacked_id = false, quiet = false;

    int run(std::ostream& os) const {
        RunOptions ro;
        try {
            ro.stage = parse_stage(stage);
        } catch (const std::exception& e) {
            throw UsageError(e.what());
        }
        const auto cfg = config.resolve();
        if (ro.stage == TrainingStage::Injector && sync_checkpoint.empty() && resume.empty())
            throw UsageError("the injector stage needs --sync-checkpoint");
        if (ro.stage != TrainingStage::Injector && !sync_checkpoint.empty())
            throw UsageError("--sync-checkpoint only applies to the injector stage");
        if (ro.stage != TrainingStage::Synchronizer && !base_checkpoint.empty())
            throw UsageError("--base-checkpoint only applies to the synchronizer stage");
        for (const auto* p : {&sync_checkpoint, &base_checkpoint, &resume})
            if (!p->empty() && !fs::exists(*p)) throw UsageError("checkpoint not found: " + *p);
        if (ro.stage == TrainingStage::Synchronizer && base_checkpoint.empty() && resume.empty() && !quiet)
            os << "warning: synchronizer stage without --base-checkpoint starts from a random backbone\n";

        ro.steps = steps;
        ro.seed = seed;
        ro.out_dir = out;
        ro.checkpoint_every = checkpoint_every;
        ro.mask_dump_every = mask_every;
        ro.init_checkpoint = ro.stage == TrainingStage::Injector ? sync_checkpoint : base_checkpoint;
        ro.resume_checkpoint = resume;
        ro.train = default_train_options(cfg);
        ro.train.lr = lr;
        ro.train.shuffle_references = !stacked_id;
        ro.quiet = quiet;

        std::vector<TrainSample> samples;
        for (const auto& g : load_groups(data, limit)) samples.push_back(make_train_sample(g, cfg));
        run_training(cfg, samples, ro);
        os << "wrote " << (fs::path(out) / "checkpoint.ckpt").string() << '\n';
        return kExitOk;
    }
};

struct Sample {
    std::string checkpoint, prompts, out, reference;
    uint64_t seed = kDefaultSeed;
    std::optional<int> steps;
    std::optional<double> guidance;
    bool no_amsa = false;

    int run(std::ostream& os) const {
        const auto story = load_prompts_file(prompts);
        const auto ck = open_checkpoint(checkpoint);
        if (!reference.empty() && ck.stage != TrainingStage::Injector)
            throw UsageError("--reference needs an injector-stage checkpoint, got a " + to_string(ck.stage) +
                             " checkpoint");
        SampleOptions so;
        so.seed = seed;
        so.steps = steps.value_or(ck.config.sample_steps);
        so.guidance = guidance.value_or(ck.config.guidance_scale);
        so.use_amsa = ck.config.use_amsa && !no_amsa;
        if (so.steps < 1 || so.steps > ck.config.train_timesteps) throw UsageError("--steps out of range");
        if (so.guidance < 1) throw UsageError("--guidance must be >= 1");

        std::optional<IdBucket> bucket;
        if (!reference.empty()) {
            if (!fs::is_directory(reference)) throw UsageError("reference directory not found: " + reference);
            bucket = load_reference_dir(reference, ck.config.reference_size);
        }
        StoryModel<float> model(ck.config, seed);
        load_parameters(model, ck);
        const auto result = ddim_sample(model, story, bucket ? &*bucket : nullptr, so);

        fs::create_directories(out);
        nlohmann::json files = nlohmann::json::array();
        for (size_t n = 0; n < result.images.size(); ++n) {
            const auto name = "story0_frame" + std::to_string(n) + ".png";
            write_png((fs::path(out) / name).string(), result.images[n]);
            files.push_back(name);
        }
        nlohmann::json prov{{"seed", seed},
                            {"guidance", so.guidance},
                            {"steps", so.steps},
                            {"use_amsa", so.use_amsa},
                            {"checkpoint", fs::path(checkpoint).filename().string()},
                            {"checkpoint_hash", file_hash(checkpoint)},
                            {"checkpoint_stage", to_string(ck.stage)},
                            {"reference", reference.empty() ? nlohmann::json(nullptr) : nlohmann::json(reference)},
                            {"frames", files}};
        write_json((fs::path(out) / "provenance.json").string(), prov);
        os << "wrote " << result.images.size() << " frames to " << out << '\n';
        return kExitOk;
    }
};

struct Eval {
    std::string checkpoint, data, report, run_id = "run", metrics, format = "text";
    std::vector<std::string> compare;
    uint64_t seed = kDefaultSeed;
    std::optional<int> steps;
    std::optional<double> guidance;
    int limit = 0;
    bool with_reference = false, no_amsa = false;

    int run(std::ostream& os) const {
        if (format != "text" && format != "json") throw UsageError("--format must be text or json");
        const auto fmt = format == "json" ? TableFormat::Json : TableFormat::Text;
        if (!compare.empty()) {
            std::vector<EvalReport> runs;
            for (const auto& path : compare) {
                std::ifstream in(path);
                if (!in) throw UsageError("cannot open report " + path);
                try {
                    runs.push_back(EvalReport::from_json(nlohmann::json::parse(in)));
                } catch (const std::exception& e) {
                    throw UsageError(path + ": " + e.what());
                }
            }
            try {
                os << ablation_table(runs, fmt);
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
            return kExitOk;
        }
        if (checkpoint.empty() || data.empty()) throw UsageError("eval needs --checkpoint and --data, or --compare");
        const auto ck = open_checkpoint(checkpoint);
        if (with_reference && ck.stage != TrainingStage::Injector)
            throw UsageError("--with-reference needs an injector-stage checkpoint");
        EvalOptions eo;
        eo.run_id = run_id;
        eo.sample.seed = seed;
        eo.sample.steps = steps.value_or(ck.config.sample_steps);
        eo.sample.guidance = guidance.value_or(ck.config.guidance_scale);
        eo.sample.use_amsa = ck.config.use_amsa && !no_amsa;
        eo.with_reference = with_reference;
        eo.dice_seed = seed;
        eo.config_hash = file_hash(checkpoint);
        std::stringstream ms(metrics);
        for (std::string m; std::getline(ms, m, ',');)
            if (!trim(m).empty()) {
                const auto name = trim(m);
                if (std::find(metric_names().begin(), metric_names().end(), name) == metric_names().end())
                    throw UsageError("unknown metric '" + name + "'");
                eo.metrics.push_back(name);
            }
        const auto groups = load_groups(data, limit);
        StoryModel<float> model(ck.config, seed);
        load_parameters(model, ck);
        const auto r = evaluate_groups(model, groups, eo);
        if (!report.empty()) write_json(report, r.to_json());
        if (fmt == TableFormat::Json) {
            os << r.to_json().dump(2) << '\n';
        } else {
            for (const auto& [k, v] : r.metrics) os << k << " " << v << "  (n=" << r.counts.at(k) << ")\n";
        }
        return kExitOk;
    }
};

struct InspectMasks {
    std::string checkpoint, group, out;
    int64_t timestep = 500;
    uint64_t seed = kDefaultSeed;
    bool no_amsa = false;

    int run(std::ostream& os, std::ostream& es) const {
        const auto ck = open_checkpoint(checkpoint);
        StoryGroup g;
        try {
            g = load_story_group(group);
        } catch (const std::exception& e) {
            throw UsageError(e.what());
        }
        const auto violations = validate_group(g);
        if (!violations.empty()) {
            for (const auto& v : violations) es << "invalid group: " << v << '\n';
            throw UsageError("group " + g.group_id + " failed validation");
        }
        StoryModel<float> model(ck.config, seed);
        load_parameters(model, ck);
        const auto sample = make_train_sample(g, ck.config);
        if (timestep < 0 || timestep >= ck.config.train_timesteps) throw UsageError("--timestep out of range");
        const auto maps = probe_maps(model, sample, timestep, seed, ck.config.use_amsa && !no_amsa);
        std::vector<MapEntry> entries;
        FrameSpans spans = sample.spans;
        entries = map_entries(spans);
        dump_masks(out, ck.step, maps, entries, sample.masks, ck.config.image_size);
        os << "wrote " << entries.size() << " mask images to " << out << '\n';
        return kExitOk;
    }
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Consistent multi-frame story generation at toy scale"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "storynizor 0.1.0");

    GenData gen;
    auto* c_gen = app.add_subcommand("gen-data", "write a synthetic story dataset");
    c_gen->add_option("--out", gen.out, "dataset directory")->required();
    c_gen->add_option("--groups", gen.groups, "number of story groups")->check(CLI::PositiveNumber);
    c_gen->add_option("--frames", gen.frames, "frames per group")->check(CLI::Range(1, 64));
    c_gen->add_option("--seed", gen.seed, "generator seed");
    c_gen->add_flag("--force", gen.force, "replace a non-empty output directory");

    Train train;
    auto* c_train = app.add_subcommand("train", "run one training stage");
    train.config.add(c_train);
    c_train->add_option("--data", train.data, "dataset directory")->required();
    c_train->add_option("--out", train.out, "run directory")->required();
    c_train->add_option("--stage", train.stage, "base | synchronizer | injector");
    c_train->add_option("--steps", train.steps, "total optimizer steps")->check(CLI::NonNegativeNumber);
    c_train->add_option("--seed", train.seed, "run seed");
    c_train->add_option("--sync-checkpoint", train.sync_checkpoint, "synchronizer checkpoint (injector stage)");
    c_train->add_option("--base-checkpoint", train.base_checkpoint, "backbone checkpoint (synchronizer stage)");
    c_train->add_option("--resume", train.resume, "continue from a checkpoint of the same stage");
    c_train->add_option("--checkpoint-every", train.checkpoint_every, "intermediate checkpoint interval");
    c_train->add_option("--mask-every", train.mask_every, "mask dump interval");
    c_train->add_option("--limit", train.limit, "use only the first N groups");
    c_train->add_option("--lr", train.lr, "learning rate override");
    c_train->add_flag("--stacked-id", train.stacked_id, "each frame sees its own crop instead of a shuffled one");
    c_train->add_flag("--quiet", train.quiet, "no progress output");

    Sample sample;
    auto* c_sample = app.add_subcommand("sample", "generate a story");
    c_sample->add_option("--checkpoint", sample.checkpoint, "checkpoint file")->required();
    c_sample->add_option("--prompts", sample.prompts, "prompts file")->required();
    c_sample->add_option("--out", sample.out, "output directory")->required();
    c_sample->add_option("--reference", sample.reference, "directory of reference images");
    c_sample->add_option("--seed", sample.seed, "sampling seed");
    c_sample->add_option("--steps", sample.steps, "DDIM steps");
    c_sample->add_option("--guidance", sample.guidance, "classifier-free guidance scale");
    c_sample->add_flag("--no-amsa", sample.no_amsa, "per-frame self-attention");

    Eval ev;
    auto* c_eval = app.add_subcommand("eval", "score a checkpoint or tabulate reports");
    c_eval->add_option("--checkpoint", ev.checkpoint, "checkpoint file");
    c_eval->add_option("--data", ev.data, "dataset directory of held-out groups");
    c_eval->add_option("--limit", ev.limit, "use only the first N groups");
    c_eval->add_option("--report", ev.report, "write the report JSON here");
    c_eval->add_option("--run-id", ev.run_id, "row label in ablation tables");
    c_eval->add_option("--metrics", ev.metrics, "comma-separated metric subset");
    c_eval->add_option("--seed", ev.seed, "sampling and probe seed");
    c_eval->add_option("--steps", ev.steps, "DDIM steps");
    c_eval->add_option("--guidance", ev.guidance, "guidance scale");
    c_eval->add_flag("--with-reference", ev.with_reference, "condition on each group's reference crops");
    c_eval->add_flag("--no-amsa", ev.no_amsa, "per-frame self-attention");
    c_eval->add_option("--compare", ev.compare, "report files to tabulate")->expected(2, 64);
    c_eval->add_option("--format", ev.format, "text | json");

    InspectMasks insp;
    auto* c_insp = app.add_subcommand("inspect-masks", "dump accumulated character maps next to GT masks");
    c_insp->add_option("--checkpoint", insp.checkpoint, "checkpoint file")->required();
    c_insp->add_option("--group", insp.group, "story group directory")->required();
    c_insp->add_option("--out", insp.out, "output directory")->required();
    c_insp->add_option("--timestep", insp.timestep, "noise level of the probe");
    c_insp->add_option("--seed", insp.seed, "probe noise seed");
    c_insp->add_flag("--no-amsa", insp.no_amsa, "per-frame self-attention");

    std::vector<std::string> argv_store{"storynizor"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : argv_store) argv.push_back(a.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << app.version() << '\n';
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        if (*c_gen) return gen.run(out);
        if (*c_train) return train.run(out);
        if (*c_sample) return sample.run(out);
        if (*c_eval) return ev.run(out);
        if (*c_insp) return insp.run(out, err);
        return kExitUsage;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "failed: " << e.what() << '\n';
        return kExitRuntime;
    }
}

}  // namespace storynizor
