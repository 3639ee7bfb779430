#include "convmr/cli.hpp"

#include <fstream>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "convmr/evaluator.hpp"
#include "convmr/kg_data.hpp"
#include "convmr/model.hpp"
#include "convmr/multirel.hpp"
#include "convmr/trainer.hpp"

namespace convmr::cli {

namespace {

using nlohmann::json;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Writes to --out when given, otherwise to the command's stdout stream.
class Sink {
public:
    Sink(const std::string& path, std::ostream& fallback) : stream_(&fallback) {
        if (!path.empty()) {
            file_ = std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc);
            if (!*file_) throw DataError("cannot write " + path);
            stream_ = file_.get();
        }
    }
    std::ostream& operator*() { return *stream_; }

private:
    std::unique_ptr<std::ofstream> file_;
    std::ostream* stream_;
};

void print_header(std::ostream& err, const std::string& command, const json& config) {
    err << "# convmr " << command << ' ' << config.dump() << '\n';
}

struct Common {
    std::string data;
    std::string out;
    std::string checkpoint;
    int threads = 1;
};

int cmd_stats(const Common& c, std::ostream& out, std::ostream& err) {
    print_header(err, "stats", {{"data", c.data}, {"out", c.out}});
    const Dataset ds = load_dataset(c.data);
    Sink sink(c.out, out);
    *sink << stats_csv_header() << '\n' << to_csv_row(dataset_stats(ds)) << '\n';
    return exit_ok;
}

int cmd_generate(const Common& c, const std::string& stats_path, std::ostream& out, std::ostream& err) {
    print_header(err, "generate", {{"data", c.data}, {"out", c.out}, {"stats", stats_path}});
    const Dataset ds = load_dataset(c.data);
    const auto multi = generate(ds.train);
    Sink sink(c.out, out);
    for (const auto& inst : multi) *sink << to_tsv_line(ds.vocab, inst) << '\n';
    if (!stats_path.empty()) {
        const auto stats = multirel_stats(multi);
        Sink st(stats_path, out);
        *st << "kind,key,count\n";
        for (const auto& [size, count] : stats.size_histogram) *st << "size," << size << ',' << count << '\n';
        for (const auto& entry : stats.ranking) {
            *st << "set,";
            for (std::size_t i = 0; i < entry.relations.size(); ++i)
                *st << (i ? "|" : "") << ds.vocab.relation(entry.relations[i]);
            *st << ',' << entry.count << '\n';
        }
    }
    err << "# " << multi.size() << " multi-relation instances from " << ds.train.size() << " training triples\n";
    return exit_ok;
}

int cmd_pretrain(const Common& c, const TransEConfig& cfg, std::ostream& err) {
    json header = cfg;
    header["data"] = c.data;
    header["out"] = c.out;
    print_header(err, "pretrain", header);
    if (c.out.empty()) throw UsageError("pretrain needs --out FILE");
    const Dataset ds = load_dataset(c.data);
    const auto emb = pretrain_transe(ds.train, ds.vocab.num_entities(), ds.vocab.num_relations(), cfg);
    save_embeddings(emb, ds.vocab.hash(), c.out);
    return exit_ok;
}

int cmd_train(const Common& c, const TrainConfig& cfg, const std::string& log_path, bool timing, std::ostream& out,
              std::ostream& err) {
    json header = cfg;
    print_header(err, "train",
                 {{"config", header}, {"data", c.data}, {"checkpoint", c.checkpoint}, {"log", log_path}, {"timing", timing}});
    cfg.validate();
    const Dataset ds = load_dataset(c.data);

    Sink log(log_path, out);
    *log << "# " << header.dump() << '\n' << train_log_csv_header() << '\n';
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochLog& e) {
        EpochLog row = e;
        if (!timing) row.seconds = 0.0;
        *log << to_csv_row(row) << '\n';
        (*log).flush();
    };
    const TrainResult result = train(ds, cfg, hooks);
    if (!c.checkpoint.empty()) save_checkpoint(result.params, ds.vocab.hash(), c.checkpoint);
    err << "# trained on " << result.training_set_size << " instances\n";
    return exit_ok;
}

const std::vector<Triple>& pick_split(const Dataset& ds, const std::string& split) {
    if (split == "test") return ds.test;
    if (split == "valid") return ds.valid;
    if (split == "train") return ds.train;
    throw UsageError("unknown split \"" + split + "\"");
}

void write_result(std::ostream& os, const std::string& split, const std::string& category, const EvalResult& r) {
    os << to_csv_row(split, category, "subject", r.subject_side) << '\n';
    os << to_csv_row(split, category, "object", r.object_side) << '\n';
    os << to_csv_row(split, category, "both", r.overall) << '\n';
}

int cmd_evaluate(const Common& c, const std::string& split, bool by_category, std::ostream& out, std::ostream& err) {
    print_header(err, "evaluate",
                 {{"data", c.data}, {"checkpoint", c.checkpoint}, {"split", split}, {"by_category", by_category},
                  {"threads", c.threads}, {"out", c.out}});
    if (c.checkpoint.empty()) throw UsageError("evaluate needs --checkpoint FILE");
    const Dataset ds = load_dataset(c.data);
    const auto triples = pick_split(ds, split);
    const auto loaded = load_checkpoint(c.checkpoint, ds.vocab.hash());
    const FilterIndex filter = build_filter_index(ds);

    Sink sink(c.out, out);
    *sink << results_csv_header() << '\n';
    write_result(*sink, split, "all", evaluate(triples, loaded.params, filter, c.threads));
    if (by_category) {
        std::vector<Triple> fallback = ds.train;
        fallback.insert(fallback.end(), ds.valid.begin(), ds.valid.end());
        const auto cats = categorize_relations(ds.train);
        for (const auto& [cat, r] : evaluate_by_category(triples, loaded.params, filter, cats, fallback, c.threads))
            write_result(*sink, split, std::string(to_string(cat)), r);
    }
    return exit_ok;
}

int cmd_categories(const Common& c, bool shares, std::ostream& out, std::ostream& err) {
    print_header(err, "categories", {{"data", c.data}, {"shares", shares}, {"out", c.out}});
    const Dataset ds = load_dataset(c.data);
    auto cats = categorize_relations(ds.train);
    Sink sink(c.out, out);
    if (shares) {
        // Test relations unseen in train are classified from train plus valid.
        std::vector<Triple> fallback = ds.train;
        fallback.insert(fallback.end(), ds.valid.begin(), ds.valid.end());
        for (const auto& [r, card] : categorize_relations(fallback)) cats.emplace(r, card);
        std::map<RelationCategory, std::size_t> counts;
        for (const auto& t : ds.test)
            if (auto it = cats.find(t.r); it != cats.end()) ++counts[it->second.category];
        *sink << "category,test_triples,share\n";
        for (const auto& [cat, share] : category_shares(ds.test, cats))
            *sink << to_string(cat) << ',' << counts[cat] << ',' << share << '\n';
    } else {
        *sink << "relation,n_s,n_o,category\n";
        for (const auto& [r, card] : cats)
            *sink << ds.vocab.relation(r) << ',' << card.n_s << ',' << card.n_o << ',' << to_string(card.category) << '\n';
    }
    return exit_ok;
}

int cmd_attention(const Common& c, const std::string& relations, std::ostream& out, std::ostream& err) {
    print_header(err, "attention", {{"data", c.data}, {"checkpoint", c.checkpoint}, {"relations", relations}, {"out", c.out}});
    if (c.checkpoint.empty()) throw UsageError("attention needs --checkpoint FILE");
    std::vector<std::string> labels;
    std::stringstream ss(relations);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) labels.push_back(item);
    if (labels.empty()) throw UsageError("attention needs --relations a,b,...");
    const Dataset ds = load_dataset(c.data);
    const auto loaded = load_checkpoint(c.checkpoint, ds.vocab.hash());
    std::vector<AttentionWeight> weights;
    try {
        weights = inspect_attention(labels, loaded.params, ds.vocab);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    Sink sink(c.out, out);
    *sink << "relation,weight\n";
    (*sink).precision(17);
    for (const auto& w : weights) *sink << w.relation << ',' << w.weight << '\n';
    return exit_ok;
}

int cmd_gradcheck(int k, int tau, const std::string& encoder, std::uint64_t seed, double tolerance, const Common& c,
                  std::ostream& out, std::ostream& err) {
    print_header(err, "gradcheck",
                 {{"k", k}, {"tau", tau}, {"encoder", encoder}, {"seed", seed}, {"step", 1e-5}, {"tolerance", tolerance}});
    std::vector<EncoderKind> kinds;
    if (encoder == "all") {
        kinds = {EncoderKind::attn_average, EncoderKind::average, EncoderKind::gru, EncoderKind::bigru};
    } else {
        try {
            kinds = {parse_encoder_kind(encoder)};
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    Sink sink(c.out, out);
    *sink << "encoder,n,max_rel_error,checked,skipped\n";
    bool ok = true;
    for (EncoderKind kind : kinds) {
        for (int n : {1, 2, 4}) {
            const auto report = check_loss_gradients(kind, k, tau, n, seed);
            ok = ok && report.max_rel_error < tolerance;
            *sink << to_string(kind) << ',' << n << ',' << report.max_rel_error << ',' << report.checked << ','
                  << report.skipped << '\n';
        }
    }
    return ok ? exit_ok : exit_numeric;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"ConvMR knowledge graph embedding toolkit", "convmr"};
    app.require_subcommand(1, 1);

    Common common;
    auto add_data = [&](CLI::App* sub) {
        sub->add_option("--data", common.data, "Directory with train.txt, valid.txt and test.txt")->required();
    };
    auto add_out = [&](CLI::App* sub) { sub->add_option("--out", common.out, "Output file (default: stdout)"); };

    auto* stats = app.add_subcommand("stats", "Entity, relation and split counts");
    add_data(stats);
    add_out(stats);

    std::string stats_path;
    auto* gen = app.add_subcommand("generate", "Multi-relation instances of the training split");
    add_data(gen);
    add_out(gen);
    gen->add_option("--stats", stats_path, "Write set-size histogram and relation-set ranking CSV here");

    TransEConfig transe;
    auto* pre = app.add_subcommand("pretrain", "TransE embeddings for pretrained initialisation");
    add_data(pre);
    add_out(pre);
    pre->add_option("--k", transe.k, "Embedding dimension");
    pre->add_option("--epochs", transe.epochs, "Epochs");
    pre->add_option("--lr", transe.lr, "SGD learning rate");
    pre->add_option("--margin", transe.margin, "Ranking margin");
    pre->add_option("--seed", transe.seed, "Random seed");

    std::string config_path, log_path, encoder_flag, init_flag, pretrained;
    bool no_multirel = false, no_attention = false, timing = false;
    std::optional<int> epochs, k, tau, num_batches, decay_every, negatives, threads_flag;
    std::optional<double> lr, decay, lambda;
    std::optional<std::uint64_t> seed;
    auto* tr = app.add_subcommand("train", "Train a ConvMR model");
    add_data(tr);
    tr->add_option("--config", config_path, "JSON training config");
    tr->add_option("--checkpoint", common.checkpoint, "Write the trained model here");
    tr->add_option("--log", log_path, "Training log CSV (default: stdout)");
    tr->add_option("--encoder", encoder_flag, "attn_average | average | gru | bigru");
    tr->add_flag("--no-multirel", no_multirel, "Train on the original triples only");
    tr->add_flag("--no-attention", no_attention, "Shorthand for --encoder average");
    tr->add_option("--epochs", epochs);
    tr->add_option("--k", k);
    tr->add_option("--tau", tau);
    tr->add_option("--num-batches", num_batches);
    tr->add_option("--lr", lr, "Initial AdaGrad learning rate");
    tr->add_option("--lr-decay", decay);
    tr->add_option("--lr-decay-every", decay_every);
    tr->add_option("--lambda", lambda, "L2 coefficient on score_w");
    tr->add_option("--negatives", negatives, "Negatives per positive");
    tr->add_option("--init", init_flag, "random | pretrained");
    tr->add_option("--pretrained", pretrained, "TransE embedding file for --init pretrained");
    tr->add_option("--seed", seed);
    tr->add_option("--threads", threads_flag);
    tr->add_flag("--timing", timing, "Record wall-clock seconds in the log (makes logs run-dependent)");

    std::string split = "test";
    bool by_category = false;
    auto* ev = app.add_subcommand("evaluate", "Filtered MR and Hits@10");
    add_data(ev);
    add_out(ev);
    ev->add_option("--checkpoint", common.checkpoint, "Model checkpoint")->required();
    ev->add_option("--split", split, "test | valid | train");
    ev->add_option("--threads", common.threads, "Parallel ranking workers")->check(CLI::PositiveNumber);
    ev->add_flag("--by-category", by_category, "Also report per relation category");
    ev->add_flag("--no-attention", no_attention, "Accepted for symmetry with train; the checkpoint fixes the encoder");

    bool shares = false;
    auto* cat = app.add_subcommand("categories", "Relation categories (1-1, 1-M, M-1, M-M)");
    add_data(cat);
    add_out(cat);
    cat->add_flag("--shares", shares, "Report the share of test triples per category");

    std::string relations;
    auto* att = app.add_subcommand("attention", "Attention weights for a relation set");
    add_data(att);
    add_out(att);
    att->add_option("--checkpoint", common.checkpoint, "attn_average checkpoint")->required();
    att->add_option("--relations", relations, "Comma-separated relation labels")->required();

    int gc_k = 8, gc_tau = 4;
    std::string gc_encoder = "all";
    std::uint64_t gc_seed = 1;
    double gc_tol = 1e-4;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the loss gradient");
    add_out(gc);
    gc->add_option("--k", gc_k);
    gc->add_option("--tau", gc_tau);
    gc->add_option("--encoder", gc_encoder, "Encoder kind or 'all'");
    gc->add_option("--seed", gc_seed);
    gc->add_option("--tolerance", gc_tol);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_usage;
    }

    try {
        if (stats->parsed()) return cmd_stats(common, out, err);
        if (gen->parsed()) return cmd_generate(common, stats_path, out, err);
        if (pre->parsed()) return cmd_pretrain(common, transe, err);
        if (tr->parsed()) {
            TrainConfig cfg;
            if (!config_path.empty()) {
                std::ifstream is(config_path);
                if (!is) throw UsageError("cannot read config " + config_path);
                try {
                    from_json(json::parse(is), cfg);
                } catch (const json::exception& e) {
                    throw UsageError(config_path + ": " + e.what());
                }
            }
            if (epochs) cfg.epochs = *epochs;
            if (k) cfg.k = *k;
            if (tau) cfg.tau = *tau;
            if (num_batches) cfg.num_batches = *num_batches;
            if (lr) cfg.initial_lr = *lr;
            if (decay) cfg.lr_decay_factor = *decay;
            if (decay_every) cfg.lr_decay_every = *decay_every;
            if (lambda) cfg.lambda = *lambda;
            if (negatives) cfg.negatives_per_positive = *negatives;
            if (seed) cfg.seed = *seed;
            if (threads_flag) cfg.threads = *threads_flag;
            if (!encoder_flag.empty()) cfg.encoder = parse_encoder_kind(encoder_flag);
            if (no_attention) cfg.encoder = EncoderKind::average;
            if (no_multirel) cfg.multirel = false;
            if (!init_flag.empty()) cfg.init = parse_init_strategy(init_flag);
            if (!pretrained.empty()) {
                cfg.pretrained_path = pretrained;
                if (init_flag.empty()) cfg.init = InitStrategy::pretrained;
            }
            return cmd_train(common, cfg, log_path, timing, out, err);
        }
        if (ev->parsed()) return cmd_evaluate(common, split, by_category, out, err);
        if (cat->parsed()) return cmd_categories(common, shares, out, err);
        if (att->parsed()) return cmd_attention(common, relations, out, err);
        if (gc->parsed()) return cmd_gradcheck(gc_k, gc_tau, gc_encoder, gc_seed, gc_tol, common, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return exit_usage;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return exit_usage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return exit_data;
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << '\n';
        return exit_data;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return exit_numeric;
    } catch (const ad::NumericError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return exit_numeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_data;
    }
    return exit_usage;
}

}  // namespace convmr::cli
