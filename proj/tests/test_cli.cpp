#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = KARM_CLI_PATH;

struct CmdResult {
    int status = -1;
    std::string out;
};

CmdResult run_cmd(const std::string& cmd) {
    CmdResult r;
    FILE* p = popen((cmd + " 2>&1").c_str(), "r");
    REQUIRE(p != nullptr);
    char buf[4096];
    while (size_t n = fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
    int rc = pclose(p);
    r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    return r;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// report JSON minus the wall-clock line, for byte comparisons
std::string without_wall_time(const std::string& text) {
    std::istringstream in(text);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line))
        if (line.find("wall_time") == std::string::npos) out << line << "\n";
    return out.str();
}

// one tiny zoo shared by the CLI tests; forged once
struct SharedZoo {
    fs::path dir;
    SharedZoo() {
        dir = fs::temp_directory_path() / "karm_cli_zoo";
        fs::remove_all(dir);
        auto r = run_cmd(kCli + " forge --out " + dir.string() +
                         " --clean 1 --universal 1 --classes 3 --height 12 --width 12"
                         " --samples-per-class 6 --epochs 40 --poison-fraction 0.5 --seed 7");
        REQUIRE(r.status == 0);
    }
};

SharedZoo& zoo() {
    static SharedZoo z;
    return z;
}

}  // namespace

TEST_CASE("analyze prints the closed forms as JSON") {
    auto r = run_cmd(kCli + " analyze --arms 5 --rounds 50 --time 1 --p 1 --epsilon 0"
                            " --preselect-m 3");
    REQUIRE(r.status == 0);
    json doc = json::parse(r.out);
    CHECK(doc["expected"]["karm"].get<double>() == doctest::Approx(58.0));
    CHECK(doc["expected"]["nc"].get<double>() == doctest::Approx(150.0));
    CHECK(doc["expected"]["preselect"].get<double>() == doctest::Approx(106.0));
    CHECK(!doc.contains("simulation"));
}

TEST_CASE("analyze includes a simulation block when --trials is given") {
    auto r = run_cmd(kCli + " analyze --arms 5 --rounds 50 --p 0.5 --epsilon 0.3"
                            " --trials 2000 --sim-seed 3");
    REQUIRE(r.status == 0);
    json doc = json::parse(r.out);
    REQUIRE(doc.contains("simulation"));
    CHECK(doc["simulation"]["trials"].get<long long>() == 2000);
    CHECK(doc["simulation"]["mean_time"].get<double>() > 0.0);
}

TEST_CASE("forge writes a manifest with the requested entry count") {
    json manifest = json::parse(slurp(zoo().dir / "manifest.json"));
    REQUIRE(manifest["entries"].size() == 2);
    int trojaned = 0;
    for (const auto& e : manifest["entries"]) {
        CHECK(fs::exists(zoo().dir / e["model_path"].get<std::string>()));
        trojaned += e["is_trojaned"].get<bool>() ? 1 : 0;
    }
    CHECK(trojaned == 1);
}

TEST_CASE("forge is deterministic for a fixed seed") {
    fs::path dir2 = fs::temp_directory_path() / "karm_cli_zoo2";
    fs::remove_all(dir2);
    auto r = run_cmd(kCli + " forge --out " + dir2.string() +
                     " --clean 1 --universal 1 --classes 3 --height 12 --width 12"
                     " --samples-per-class 6 --epochs 40 --poison-fraction 0.5 --seed 7");
    REQUIRE(r.status == 0);
    CHECK(slurp(zoo().dir / "manifest.json") == slurp(dir2 / "manifest.json"));
    CHECK(slurp(zoo().dir / "model_0.karm") == slurp(dir2 / "model_0.karm"));
    fs::remove_all(dir2);
}

TEST_CASE("scan produces one report and one trajectory per model, reproducibly") {
    fs::path rep1 = zoo().dir / "reports1";
    fs::path rep2 = zoo().dir / "reports2";
    std::string flags = " scan --manifest " + (zoo().dir / "manifest.json").string() +
                        " --seed 1 --max-rounds 12";
    REQUIRE(run_cmd(kCli + flags + " --out " + rep1.string()).status == 0);
    REQUIRE(run_cmd(kCli + flags + " --out " + rep2.string()).status == 0);

    int reports = 0;
    for (const auto& e : fs::directory_iterator(rep1)) {
        std::string name = e.path().filename().string();
        if (name.ends_with(".report.json")) {
            ++reports;
            CHECK(without_wall_time(slurp(e.path())) ==
                  without_wall_time(slurp(rep2 / name)));
        }
        if (name.ends_with(".trajectory.csv"))
            CHECK(slurp(e.path()) == slurp(rep2 / name));
    }
    CHECK(reports == 2);
}

TEST_CASE("KARM_SEED is the fallback when --seed is absent") {
    fs::path rep_env = zoo().dir / "reports_env";
    std::string manifest = (zoo().dir / "manifest.json").string();
    auto r = run_cmd("KARM_SEED=1 " + kCli + " scan --manifest " + manifest +
                     " --max-rounds 12 --out " + rep_env.string());
    REQUIRE(r.status == 0);
    for (const auto& e : fs::directory_iterator(zoo().dir / "reports1")) {
        std::string name = e.path().filename().string();
        if (name.ends_with(".report.json"))
            CHECK(without_wall_time(slurp(e.path())) ==
                  without_wall_time(slurp(rep_env / name)));
    }
}

TEST_CASE("parallel scan matches the sequential reports") {
    fs::path rep_par = zoo().dir / "reports_par";
    std::string manifest = (zoo().dir / "manifest.json").string();
    auto r = run_cmd(kCli + " scan --manifest " + manifest + " --seed 1 --max-rounds 12" +
                     " --parallelism 2 --out " + rep_par.string());
    REQUIRE(r.status == 0);
    for (const auto& e : fs::directory_iterator(zoo().dir / "reports1")) {
        std::string name = e.path().filename().string();
        if (name.ends_with(".report.json"))
            CHECK(without_wall_time(slurp(e.path())) ==
                  without_wall_time(slurp(rep_par / name)));
    }
}

TEST_CASE("metrics command scores the reports against the manifest") {
    fs::path out = zoo().dir / "metrics.csv";
    auto r = run_cmd(kCli + " metrics --manifest " + (zoo().dir / "manifest.json").string() +
                     " --reports " + (zoo().dir / "reports1").string() + " --out " +
                     out.string());
    REQUIRE(r.status == 0);
    CHECK(r.out.find("accuracy=") != std::string::npos);
    std::string csv = slurp(out);
    CHECK(csv.find("model_id") != std::string::npos);
    CHECK(csv.find("# accuracy") != std::string::npos);
}

TEST_CASE("unreadable model file yields an error record and nonzero exit") {
    fs::path broken = fs::temp_directory_path() / "karm_cli_broken";
    fs::remove_all(broken);
    fs::create_directories(broken);
    fs::copy(zoo().dir / "manifest.json", broken / "manifest.json");
    // model files are referenced but absent
    auto r = run_cmd(kCli + " scan --manifest " + (broken / "manifest.json").string() +
                     " --seed 1 --out " + (broken / "reports").string());
    CHECK(r.status != 0);
    int errors = 0;
    for (const auto& e : fs::directory_iterator(broken / "reports"))
        if (e.path().filename().string().ends_with(".error.json")) ++errors;
    CHECK(errors == 2);
    fs::remove_all(broken);
}

TEST_CASE("sweep writes one CSV row per grid value") {
    fs::path out = zoo().dir / "sweep.csv";
    auto r = run_cmd(kCli + " sweep --manifest " + (zoo().dir / "manifest.json").string() +
                     " --parameter beta --values 1e4,1e5 --seed 2 --max-rounds 8 --out " +
                     out.string());
    REQUIRE(r.status == 0);
    std::istringstream csv(slurp(out));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "parameter,value,accuracy,mean_scan_time");
    int rows = 0;
    while (std::getline(csv, line))
        if (!line.empty()) {
            ++rows;
            CHECK(line.rfind("beta,", 0) == 0);
        }
    CHECK(rows == 2);
}

TEST_CASE("analyze --fit-p estimates the greedy hit rate from trajectories") {
    auto r = run_cmd(kCli + " analyze --arms 5 --rounds 20 --fit-p " +
                     (zoo().dir / "reports1").string());
    REQUIRE(r.status == 0);
    json doc = json::parse(r.out);
    REQUIRE(doc.contains("fitted_p"));
    double p = doc["fitted_p"].get<double>();
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
    CHECK(doc["params"]["greedy_hit_prob"].get<double>() == doctest::Approx(p));
}
