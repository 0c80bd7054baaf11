#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
    const std::string cmd = std::string(DDLAB_CLI_PATH) + " " + args + " 2>&1";
    RunResult r;
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    std::array<char, 4096> buf;
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.output.append(buf.data(), n);
    const int status = ::pclose(p);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct Workspace {
    fs::path root;
    Workspace() {
        root = fs::temp_directory_path() / ("ddlab_cli_test_" + std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Workspace() { fs::remove_all(root); }

    std::string write(const std::string& name, const std::string& content) const {
        const fs::path p = root / name;
        std::ofstream os(p);
        os << content;
        return p.string();
    }
    std::string dir(const std::string& name) const { return (root / name).string(); }
};

const char* kSmallSpec =
    "domains = 3\n"
    "classes = 2\n"
    "height = 8\n"
    "width = 8\n"
    "samples_per_domain_per_class = 12\n"
    "shift_strength = 2.0\n"
    "seed = 5\n";

std::string small_train_config(const std::string& dataset) {
    return "dataset = " + dataset +
           "\n"
           "target_domain = d2\n"
           "backbone = mlp\n"
           "epochs = 2\n"
           "batch_size = 16\n"
           "variant = full\n"
           "seed = 3\n";
}

}  // namespace

TEST_CASE("gen-data writes byte-identical outputs and a manifest") {
    Workspace ws;
    const std::string spec = ws.write("spec.cfg", kSmallSpec);
    RunResult a = run_cli("gen-data --spec " + spec + " --out " + ws.dir("a"));
    INFO(a.output);
    REQUIRE(a.exit_code == 0);
    RunResult b = run_cli("gen-data --spec " + spec + " --out " + ws.dir("b"));
    REQUIRE(b.exit_code == 0);

    for (const char* f : {"dataset.csv", "dataset.bin"}) {
        const std::string fa = read_file(fs::path(ws.dir("a")) / f);
        CHECK(!fa.empty());
        CHECK(fa == read_file(fs::path(ws.dir("b")) / f));
    }
    const std::string manifest = read_file(fs::path(ws.dir("a")) / "manifest.json");
    CHECK(manifest.find("\"shift_strength\": 2.0") != std::string::npos);
    CHECK(manifest.find("\"domains\": 3") != std::string::npos);
}

TEST_CASE("malformed configs exit with code 2 and name the offending key") {
    Workspace ws;
    const std::string bad_spec = ws.write("bad.cfg", "domains = 3\nshift_strenght = 2.0\n");
    RunResult r = run_cli("gen-data --spec " + bad_spec + " --out " + ws.dir("x"));
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("shift_strenght") != std::string::npos);

    const std::string bad_val = ws.write("badval.cfg", "domains = three\n");
    RunResult r2 = run_cli("gen-data --spec " + bad_val + " --out " + ws.dir("x"));
    CHECK(r2.exit_code == 2);
    CHECK(r2.output.find("domains") != std::string::npos);

    // train config with an unknown key
    const std::string bad_train = ws.write("badtrain.cfg", "dataset = d.bin\nlearning_rate = 0.1\n");
    RunResult r3 = run_cli("train --config " + bad_train + " --out " + ws.dir("x"));
    CHECK(r3.exit_code == 2);
    CHECK(r3.output.find("learning_rate") != std::string::npos);

    // CLI-level parse error (missing required option)
    CHECK(run_cli("gen-data").exit_code == 2);
    // bad variant name on the command line
    const std::string cfg = ws.write("t.cfg", "dataset = d.bin\n");
    CHECK(run_cli("train --config " + cfg + " --variant bogus --out " + ws.dir("x")).exit_code == 2);
}

TEST_CASE("missing input files exit with code 3") {
    Workspace ws;
    RunResult r = run_cli("gen-data --spec " + ws.dir("nope.cfg") + " --out " + ws.dir("x"));
    CHECK(r.exit_code == 3);

    const std::string cfg = ws.write("t.cfg", small_train_config(ws.dir("missing.bin")));
    CHECK(run_cli("train --config " + cfg + " --out " + ws.dir("x")).exit_code == 3);

    CHECK(run_cli("eval --checkpoint " + ws.dir("no.ckpt") + " --dataset " + ws.dir("no.bin") +
                  " --domain d0")
              .exit_code == 3);
}

TEST_CASE("train, eval and analyze round-trip reproducibly") {
    Workspace ws;
    const std::string spec = ws.write("spec.cfg", kSmallSpec);
    REQUIRE(run_cli("gen-data --spec " + spec + " --out " + ws.dir("data")).exit_code == 0);
    const std::string dataset = (fs::path(ws.dir("data")) / "dataset.bin").string();
    const std::string cfg = ws.write("train.cfg", small_train_config(dataset));

    RunResult t1 = run_cli("train --config " + cfg + " --out " + ws.dir("run1"));
    INFO(t1.output);
    REQUIRE(t1.exit_code == 0);
    CHECK(t1.output.find("best_epoch=") != std::string::npos);
    RunResult t2 = run_cli("train --config " + cfg + " --out " + ws.dir("run2"));
    REQUIRE(t2.exit_code == 0);

    // identical seed and config: metrics stream and checkpoint are
    // byte-for-byte identical
    const std::string metrics1 = read_file(fs::path(ws.dir("run1")) / "metrics.jsonl");
    CHECK(!metrics1.empty());
    CHECK(metrics1 == read_file(fs::path(ws.dir("run2")) / "metrics.jsonl"));
    const std::string ckpt1 = read_file(fs::path(ws.dir("run1")) / "best.ckpt");
    CHECK(!ckpt1.empty());
    CHECK(ckpt1 == read_file(fs::path(ws.dir("run2")) / "best.ckpt"));

    // a different seed changes the metrics
    RunResult t3 = run_cli("train --config " + cfg + " --seed 77 --out " + ws.dir("run3"));
    REQUIRE(t3.exit_code == 0);
    CHECK(metrics1 != read_file(fs::path(ws.dir("run3")) / "metrics.jsonl"));

    const std::string ckpt = (fs::path(ws.dir("run1")) / "best.ckpt").string();
    RunResult e1 = run_cli("eval --checkpoint " + ckpt + " --dataset " + dataset + " --domain d2");
    INFO(e1.output);
    REQUIRE(e1.exit_code == 0);
    REQUIRE(e1.output.rfind("accuracy=", 0) == 0);
    const double acc = std::stod(e1.output.substr(std::string("accuracy=").size()));
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    RunResult e2 = run_cli("eval --checkpoint " + ckpt + " --dataset " + dataset + " --domain d2");
    CHECK(e1.output == e2.output);

    // unknown domain name
    CHECK(run_cli("eval --checkpoint " + ckpt + " --dataset " + dataset + " --domain d9")
              .exit_code == 3);

    RunResult an = run_cli("analyze --checkpoint " + ckpt + " --dataset " + dataset +
                           " --target d2 --out " + ws.dir("reports"));
    INFO(an.output);
    REQUIRE(an.exit_code == 0);
    // mlp backbone: 3 blocks + pooled feature = 4 middle layers
    for (int l = 0; l < 4; ++l) {
        const std::string tag = std::to_string(l);
        CHECK(fs::exists(fs::path(ws.dir("reports")) / ("divergence_" + tag + ".csv")));
        CHECK(fs::exists(fs::path(ws.dir("reports")) / ("divergence_" + tag + ".json")));
        CHECK(fs::exists(fs::path(ws.dir("reports")) / ("channel_stats_" + tag + ".csv")));
    }
    const std::string dj = read_file(fs::path(ws.dir("reports")) / "divergence_0.json");
    CHECK(dj.find("beta_hat") != std::string::npos);
    CHECK(dj.find("gamma_hat") != std::string::npos);
    CHECK(dj.find("inter_domain_gap") != std::string::npos);

    CHECK(run_cli("analyze --checkpoint " + ckpt + " --dataset " + dataset +
                  " --target d2 --layer 9 --out " + ws.dir("reports2"))
              .exit_code == 2);
}
