// Acceptance run. Prints one line per criterion and exits nonzero if any fail.
//
// usage: acceptance <work dir>
// The work dir receives two full default `bench` runs (run1, run2).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include "focusbench/focusbench.hpp"

using namespace focusbench;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

using Table = std::vector<std::map<std::string, std::string>>;

Table read_csv(const fs::path& p)
{
    std::ifstream in(p);
    if (!in)
        throw Error("cannot open " + p.string());
    Table t;
    std::vector<std::string> header;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#')
            continue;
        std::vector<std::string> cells;
        std::istringstream row(line);
        std::string cell;
        while (std::getline(row, cell, ','))
            cells.push_back(cell);
        if (header.empty()) {
            header = cells;
            continue;
        }
        std::map<std::string, std::string> r;
        for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i)
            r[header[i]] = cells[i];
        t.push_back(r);
    }
    return t;
}

double lookup(const Table& t, const std::string& method, const std::string& col, int budget = -1)
{
    for (const auto& r : t)
        if (r.at("method") == method && (budget < 0 || std::stoi(r.at("budget")) == budget))
            return std::stod(r.at(col));
    throw Error("no " + col + " for " + method);
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c);
    return buf;
}

// --- 1 ---

Verdict planted_shift_recovery()
{
    const auto t0 = std::chrono::steady_clock::now();
    NoiseModel n;
    n.seed = 11;
    VirtualMicroscope scope({}, {}, padded_specimen({}, 128, 60.0, 11), 0.0, n);
    const ZStack stack = acquire_stack(scope, -60.0, 60.0, 0.5, scope.centered(128, 128));
    OracleScorer clean(scope);
    CalibrationCurve calib = build_calibration(stack, clean, stack.slices.front().image.bounds());
    calib.moffat = fit_moffat(calib);
    const double f = fwhm(*calib.moffat);

    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> shift(-2.0 * f, 2.0 * f);
    std::normal_distribution<double> noise(0.0, 0.01);
    int hits = 0;
    const int trials = 100;
    for (int i = 0; i < trials; ++i) {
        const double dz = shift(rng);
        std::vector<AfSample> s;
        // the three opening probes of an autofocus run
        for (double z : {-2.0 * f, 0.0, 2.0 * f})
            s.push_back({z, std::clamp(interpolate(calib, z - dz).b + noise(rng), 0.0, 1.0)});
        if (std::abs(correlate_shift(s, calib).dz_um - dz) <= 0.3)
            ++hits;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {hits >= 90 && secs < 10.0,
            std::to_string(hits) + "/100 within 0.3 um, " + fmt("%.2f s (FWHM %.3f um)", secs, f)};
}

// --- 2, 3, 6, 7 from the bench reports ---

Verdict af_accuracy(const fs::path& run)
{
    const Table t = read_csv(run / "af_summary.csv");
    const double err = lookup(t, "ORACLE", "mean_error_um", 4);
    const double imgs = lookup(t, "ORACLE", "mean_images", 4);
    const double trials = lookup(t, "ORACLE", "trials", 4);
    return {err <= 0.5 && trials >= 100,
            fmt("ORACLE budget 4: mean |error| %.3f um over %.0f trials, %.2f images/trial", err, trials, imgs)};
}

Verdict image_count_advantage(const fs::path& run)
{
    const Table t = read_csv(run / "af_summary.csv");
    bool pass = true;
    std::string d;
    const double corr3 = lookup(t, "ORACLE", "mean_error_um", 3);
    d += fmt("budget 3: ORACLE %.3f", corr3);
    for (const char* m : {"BRENT+TENENGRAD", "BRENT+HPF"}) {
        const double b3 = lookup(t, m, "mean_error_um", 3);
        d += std::string(", ") + m + fmt(" %.3f", b3);
        pass = pass && corr3 < b3;
    }
    for (const char* m : {"BRENT+TENENGRAD", "BRENT+HPF"}) {
        std::string parity;
        for (int k = 3; k <= 10; ++k) {
            const bool at = lookup(t, m, "mean_error_um", k) <= 2.0 * lookup(t, "ORACLE", "mean_error_um", k);
            if (at)
                parity += (parity.empty() ? "" : ",") + std::to_string(k);
            pass = pass && (k >= 8 ? at : !at);
        }
        d += std::string("; ") + m + " within 2x at budgets {" + parity + "}";
    }
    return {pass, d};
}

Verdict invariance_ordering(const fs::path& run)
{
    const Table t = read_csv(run / "invariance.csv");
    const double oracle = lookup(t, "ORACLE", "sigma");
    const double spectral = lookup(t, "SPECTRAL", "sigma");
    int above = 0;
    std::string names;
    for (MetricKind m : all_metrics) {
        const double s = lookup(t, to_string(m), "sigma");
        if (s > spectral) {
            ++above;
            names += std::string(names.empty() ? "" : ",") + to_string(m);
        }
    }
    return {oracle == 0.0 && spectral <= 0.08 && above >= 4,
            fmt("ORACLE sd %.3g, SPECTRAL sd %.4f, ", oracle, spectral) + std::to_string(above) +
                "/6 classical above SPECTRAL {" + names + "}"};
}

Verdict depth_range_ordering(const fs::path& run)
{
    const Table t = read_csv(run / "range.csv");
    bool pass = true;
    std::string d;
    for (const char* s : {"ORACLE", "SPECTRAL"})
        for (const char* c : {"WS", "SML"}) {
            const double a = lookup(t, s, "range_um"), b = lookup(t, c, "range_um");
            pass = pass && a >= 2.0 * b;
            d += (d.empty() ? "" : ", ") + std::string(s) + "/" + c + fmt(" %.2f", b > 0 ? a / b : INFINITY);
        }
    return {pass, "range ratios " + d + " (need >= 2)"};
}

// --- 4, 5, 8 ---

Verdict moffat_round_trip()
{
    MoffatFit truth;
    truth.amplitude = 0.85;
    truth.offset = 0.95;
    truth.z0_um = 2.5;
    truth.gamma_um = 14.0;
    truth.beta = 1.7;
    CalibrationCurve c;
    c.spacing_um = 0.5;
    for (int i = -120; i <= 120; ++i)
        c.samples.push_back({0.5 * i, truth(0.5 * i)});
    const MoffatFit m = fit_moffat(c);
    double worst = 0.0;
    for (auto [got, want] : {std::pair{m.amplitude, truth.amplitude}, {m.offset, truth.offset}, {m.z0_um, truth.z0_um},
                             {m.gamma_um, truth.gamma_um}, {m.beta, truth.beta}})
        worst = std::max(worst, std::abs(got - want) / std::abs(want));
    double identity = 0.0;
    for (double g : {0.5, 1.0, 3.0, 7.25, 40.0})
        identity = std::max(identity, std::abs(moffat_fwhm(g, 1.0) - 2.0 * g));
    return {worst <= 1e-6 && identity <= 1e-12,
            fmt("worst relative parameter error %.2e, |FWHM(beta=1) - 2 gamma| %.1e", worst, identity)};
}

Verdict entropy_oracle()
{
    auto brute = [](const std::vector<std::vector<double>>& p) {
        double h = 0.0;
        for (std::size_t z = 0; z < p.size(); ++z)
            for (std::size_t b = 0; b < p[z].size(); ++b) {
                if (p[z][b] == 0.0)
                    continue;
                double s = 0.0;
                for (const auto& row : p)
                    s += row[b];
                h -= p[z][b] * std::log(p[z][b] / s);
            }
        return h;
    };
    const std::vector<std::vector<std::vector<double>>> tables{
        {{1.0, 0.0}, {0.5, 0.5}, {0.0, 1.0}},
        {{0.25, 0.75}, {0.6, 0.4}, {0.1, 0.9}},
        {{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}},
        {{0.0, 1.0}, {0.0, 1.0}, {1.0, 0.0}},
    };
    double worst = 0.0;
    for (const auto& t : tables)
        worst = std::max(worst, std::abs(entropy_from_table(t) - brute(t)));

    bool exact = true;
    for (int nz : {2, 5, 33}) {
        CurveEnsemble e;
        ScoreCurve c;
        c.normalized = true;
        for (int i = 0; i < nz; ++i)
            c.samples.push_back({static_cast<double>(i), 0.4});
        e.curves = {c, c};
        e.labels = {"a", "b"};
        exact = exact && conditional_entropy(e, 64) == nz * std::log(static_cast<double>(nz));
    }
    return {worst <= 1e-12 && exact,
            fmt("max |table - brute force| %.1e, ", worst) + "constant curve = Nz ln Nz " + (exact ? "exactly" : "NOT exactly")};
}

Verdict gss_contraction()
{
    const double r = 0.6180339887498949;
    auto f = [](double z) { return (z - 2) * (z - 2); };
    auto g = GoldenSection::from_interval(0.0, 5.0, f);
    double len = g.length(), worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const double z = g.next_probe();
        g.update({z, f(z)});
        worst = std::max(worst, std::abs(g.length() - r * len));
        len = g.length();
    }
    auto h = GoldenSection::from_interval(0.0, 5.0, f);
    int steps = 0;
    while (h.length() > 1e-3 && steps < 25) {
        const double z = h.next_probe();
        h.update({z, f(z)});
        ++steps;
    }
    const bool located = h.length() <= 1e-3 && std::abs(h.mid().z_um - 2.0) <= 1e-3;
    return {worst <= 1e-12 && located,
            fmt("max |L(k+1) - (phi-1) L(k)| %.1e, (z-2)^2 bracket %.1e after ", worst, h.length()) +
                std::to_string(steps) + " steps, best z " + fmt("%.6f", h.mid().z_um)};
}

// --- 9 ---

int run_bench(const fs::path& dir)
{
    fs::remove_all(dir);
    const std::string cmd = std::string(FOCUSBENCH_CLI) + " bench --seed 1 -o " + dir.string() + " > " +
                            (dir.string() + ".log") + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict determinism(const fs::path& a, const fs::path& b)
{
    int same = 0, total = 0;
    std::string diff;
    for (const auto& e : fs::directory_iterator(a)) {
        if (e.path().extension() != ".csv")
            continue;
        ++total;
        if (slurp(e.path()) == slurp(b / e.path().filename()))
            ++same;
        else
            diff += " " + e.path().filename().string();
    }
    return {total >= 5 && same == total,
            std::to_string(same) + "/" + std::to_string(total) + " CSVs byte-identical" + (diff.empty() ? "" : ", differ:" + diff)};
}

}  // namespace

int main(int argc, char** argv)
{
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "focusbench_acceptance";
    fs::create_directories(work);
    const fs::path run1 = work / "run1", run2 = work / "run2";

    std::vector<std::pair<int, std::function<Verdict()>>> checks{
        {1, planted_shift_recovery},
        {4, moffat_round_trip},
        {5, entropy_oracle},
        {8, gss_contraction},
    };
    std::map<int, Verdict> results;
    for (auto& [n, fn] : checks) {
        try {
            results[n] = fn();
        } catch (const std::exception& e) {
            results[n] = {false, std::string("error: ") + e.what()};
        }
    }

    std::fprintf(stderr, "running two full default benches in %s\n", work.string().c_str());
    const int c1 = run_bench(run1);
    const int c2 = run_bench(run2);
    if (c1 != 0 || c2 != 0) {
        const std::string why = "bench exited " + std::to_string(c1) + "/" + std::to_string(c2) + ", see " +
                                (run1.string() + ".log");
        for (int n : {2, 3, 6, 7, 9})
            results[n] = {false, why};
    } else {
        const std::vector<std::pair<int, std::function<Verdict()>>> bench_checks{
            {2, [&] { return af_accuracy(run1); }},
            {3, [&] { return image_count_advantage(run1); }},
            {6, [&] { return invariance_ordering(run1); }},
            {7, [&] { return depth_range_ordering(run1); }},
            {9, [&] { return determinism(run1, run2); }},
        };
        for (auto& [n, fn] : bench_checks) {
            try {
                results[n] = fn();
            } catch (const std::exception& e) {
                results[n] = {false, std::string("error: ") + e.what()};
            }
        }
    }

    int failed = 0;
    for (const auto& [n, v] : results) {
        std::printf("criterion %d: %s %s\n", n, v.pass ? "PASS" : "FAIL", v.detail.c_str());
        failed += v.pass ? 0 : 1;
    }
    std::printf("%d/9 criteria passed\n", 9 - failed);
    return failed == 0 ? 0 : 1;
}
