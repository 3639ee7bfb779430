#include <doctest.h>

#include <sstream>

#include "convmr/cli.hpp"
#include "support.hpp"

using convmr::testing::read_file;
using convmr::testing::TempDir;
namespace cli = convmr::cli;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "convmr");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

void write_toy(const std::filesystem::path& dir) {
    convmr::testing::write_dataset(dir,
                                   {{"a", "p", "b"}, {"a", "q", "b"}, {"b", "p", "c"}, {"c", "q", "d"},
                                    {"c", "r", "d"}, {"d", "p", "e"}, {"e", "r", "a"}, {"e", "p", "a"}},
                                   {{"a", "r", "c"}}, {{"b", "q", "e"}, {"d", "r", "a"}});
}

}  // namespace

TEST_CASE("stats prints one csv row") {
    TempDir dir("cli_stats");
    write_toy(dir / "toy");
    const Result r = run({"stats", "--data", (dir / "toy").string()});
    CHECK(r.code == cli::exit_ok);
    CHECK(r.out == "dataset,entities,relations,train,valid,test\ntoy,5,3,8,1,2\n");
    CHECK(r.err.starts_with("# convmr stats {"));
}

TEST_CASE("usage errors exit 1") {
    CHECK(run({}).code == cli::exit_usage);
    CHECK(run({"bogus"}).code == cli::exit_usage);
    CHECK(run({"stats"}).code == cli::exit_usage);
    CHECK(run({"gradcheck", "--encoder", "lstm"}).code == cli::exit_usage);
    CHECK(run({"--help"}).code == cli::exit_ok);
}

TEST_CASE("data errors exit 2") {
    TempDir dir("cli_data");
    CHECK(run({"stats", "--data", (dir / "nowhere").string()}).code == cli::exit_data);
    convmr::testing::write_dataset(dir / "bad", {{"a", "p", "b"}}, {}, {});
    convmr::testing::write_file(dir / "bad" / "test.txt", "a\tp\n");
    const Result r = run({"stats", "--data", (dir / "bad").string()});
    CHECK(r.code == cli::exit_data);
    CHECK(r.err.find(":1:") != std::string::npos);
}

TEST_CASE("generate writes instances and stats") {
    TempDir dir("cli_gen");
    write_toy(dir / "toy");
    const Result r = run({"generate", "--data", (dir / "toy").string(), "--out", (dir / "m.tsv").string(), "--stats",
                          (dir / "s.csv").string()});
    CHECK(r.code == cli::exit_ok);
    CHECK(read_file(dir / "m.tsv") == "a\tp,q\tb\nc\tq,r\td\ne\tp,r\ta\n");
    CHECK(read_file(dir / "s.csv") == "kind,key,count\nsize,2,3\nset,p|q,1\nset,p|r,1\nset,q|r,1\n");
}

TEST_CASE("gradcheck passes for the attention encoder") {
    const Result r = run({"gradcheck", "--k", "8", "--tau", "4", "--encoder", "attn_average"});
    CHECK(r.code == cli::exit_ok);
    CHECK(r.out.starts_with("encoder,n,max_rel_error,checked,skipped\nattn_average,1,"));
}

TEST_CASE("train twice with one seed gives identical logs and checkpoints") {
    TempDir dir("cli_train");
    write_toy(dir / "toy");
    convmr::testing::write_file(dir / "c.json", R"({"epochs": 4, "k": 6, "tau": 3, "num_batches": 2, "seed": 3})");
    const std::string before = read_file(dir / "toy" / "train.txt");
    for (const char* tag : {"a", "b"}) {
        const Result r = run({"train", "--data", (dir / "toy").string(), "--config", (dir / "c.json").string(), "--seed",
                              "7", "--log", (dir / (std::string(tag) + ".log")).string(), "--checkpoint",
                              (dir / (std::string(tag) + ".ck")).string()});
        REQUIRE(r.code == cli::exit_ok);
    }
    CHECK(read_file(dir / "a.log") == read_file(dir / "b.log"));
    CHECK(read_file(dir / "a.ck") == read_file(dir / "b.ck"));
    CHECK(read_file(dir / "toy" / "train.txt") == before);

    const std::string log = read_file(dir / "a.log");
    // Flag beats config file, config file beats defaults.
    CHECK(log.find("\"seed\":7") != std::string::npos);
    CHECK(log.find("\"k\":6") != std::string::npos);
    CHECK(log.find("\"lambda\":0.001") != std::string::npos);
    CHECK(log.find("epoch,mean_loss,lr,seconds\n0,") != std::string::npos);

    const Result ev = run({"evaluate", "--data", (dir / "toy").string(), "--checkpoint", (dir / "a.ck").string(),
                           "--by-category"});
    CHECK(ev.code == cli::exit_ok);
    CHECK(ev.out.starts_with("split,category,side,queries,mean_rank,hits_at_10\ntest,all,subject,2,"));

    const Result att = run({"attention", "--data", (dir / "toy").string(), "--checkpoint", (dir / "a.ck").string(),
                            "--relations", "p,q"});
    CHECK(att.code == cli::exit_ok);
    CHECK(att.out.starts_with("relation,weight\n"));
}

TEST_CASE("bad config and bad checkpoint") {
    TempDir dir("cli_cfg");
    write_toy(dir / "toy");
    convmr::testing::write_file(dir / "c.json", R"({"epochz": 4})");
    CHECK(run({"train", "--data", (dir / "toy").string(), "--config", (dir / "c.json").string()}).code ==
          cli::exit_usage);
    CHECK(run({"train", "--data", (dir / "toy").string(), "--config", (dir / "none.json").string()}).code ==
          cli::exit_usage);
    convmr::testing::write_file(dir / "junk.ck", "not a checkpoint");
    CHECK(run({"evaluate", "--data", (dir / "toy").string(), "--checkpoint", (dir / "junk.ck").string()}).code ==
          cli::exit_data);
}

TEST_CASE("attention needs an attention model") {
    TempDir dir("cli_att");
    write_toy(dir / "toy");
    REQUIRE(run({"train", "--data", (dir / "toy").string(), "--k", "4", "--tau", "2", "--epochs", "1",
                 "--no-attention", "--log", (dir / "l.csv").string(), "--checkpoint", (dir / "m.ck").string()})
                .code == cli::exit_ok);
    CHECK(read_file(dir / "l.csv").find("\"encoder\":\"average\"") != std::string::npos);
    CHECK(run({"attention", "--data", (dir / "toy").string(), "--checkpoint", (dir / "m.ck").string(), "--relations",
               "p,q"})
              .code == cli::exit_usage);
}

TEST_CASE("categories") {
    TempDir dir("cli_cat");
    write_toy(dir / "toy");
    const Result r = run({"categories", "--data", (dir / "toy").string()});
    CHECK(r.code == cli::exit_ok);
    CHECK(r.out.starts_with("relation,n_s,n_o,category\np,"));
    const Result s = run({"categories", "--data", (dir / "toy").string(), "--shares"});
    CHECK(s.code == cli::exit_ok);
    CHECK(s.out.starts_with("category,test_triples,share\n"));
}
