#include "ofa/search.h"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace ofa {

void Constraint::validate() const {
    if (epsilon < 0) throw ConfigError("constraint epsilon must be >= 0");
    if (target_params - epsilon <= 0) throw ConfigError("constraint lower bound must be positive");
    if (population < 1) throw ConfigError("constraint population must be >= 1");
}

ArchConfig sample_in_constraint(Rng& rng, const SupernetSpec& spec, const Constraint& constraint) {
    constraint.validate();
    constexpr int kMaxRejections = 100000;
    for (int attempt = 0; attempt < kMaxRejections; ++attempt) {
        auto arch = sample_arch(rng, spec);
        const int64_t params = count_params(spec, arch);
        if (params >= constraint.lo() && params <= constraint.hi()) return arch;
    }
    throw InfeasibleError("no arch with params in [" + std::to_string(constraint.lo()) + ", " +
                          std::to_string(constraint.hi()) + "] after 100000 draws; space spans [" +
                          std::to_string(count_params(spec, smallest_arch(spec))) + ", " +
                          std::to_string(count_params(spec, largest_arch(spec))) + "]");
}

double evaluate_arch(const Model& supernet, const ArchConfig& arch, const DatasetCache& eval_set,
                     const DatasetCache& calib_set, const SearchOptions& opt) {
    if (eval_set.size() == 0) throw InputError("empty evaluation set");
    if (calib_set.size() == 0) throw InputError("empty calibration set");

    BnOverride stats = clone_bn_stats(supernet);
    auto view = make_view(supernet, arch);
    // fixed calibration order: calib batches walk the split in manifest order
    int cursor = 0;
    for (int pass = 0; pass < opt.calib_batches; ++pass) {
        std::vector<int> rows;
        for (int i = 0; i < opt.batch_size; ++i) {
            rows.push_back(cursor);
            cursor = (cursor + 1) % calib_set.size();
        }
        auto batch = make_batch(calib_set, rows);
        subnet_forward(view, batch.features, BnMode::kTrain, &stats);  // stats update only, no tape
    }
    return evaluate_map(supernet, arch, eval_set, opt.batch_size, &stats, opt.eval_limit);
}

PopulationStats population_stats(const std::vector<double>& scores) {
    if (scores.empty()) throw InputError("population statistics over an empty set");
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    const auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(sorted.size() - 1);
        const size_t lo = static_cast<size_t>(pos);
        const size_t hi = std::min(lo + 1, sorted.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    };
    PopulationStats s;
    s.min = sorted.front();
    s.max = sorted.back();
    s.q1 = quantile(0.25);
    s.median = quantile(0.5);
    s.q3 = quantile(0.75);
    double sum = 0.0;
    for (double v : sorted) sum += v;
    s.mean = sum / static_cast<double>(sorted.size());
    double sq = 0.0;
    for (double v : sorted) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(sorted.size()));
    return s;
}

std::vector<SearchReport> random_search(const Model& supernet, const std::vector<Constraint>& constraints,
                                        const DatasetCache& eval_set, const DatasetCache& calib_set,
                                        uint64_t seed, const SearchOptions& opt) {
    std::vector<SearchReport> reports;
    for (size_t ci = 0; ci < constraints.size(); ++ci) {
        const auto& constraint = constraints[ci];
        constraint.validate();
        Rng rng = derive_rng(seed, kStreamSearch, ci);

        SearchReport report;
        report.constraint = constraint;
        std::set<std::string> seen;
        constexpr int kMaxDuplicateRounds = 100000;
        int rounds = 0;
        while (static_cast<int>(report.candidates.size()) < constraint.population) {
            if (++rounds > kMaxDuplicateRounds)
                throw InfeasibleError("fewer than " + std::to_string(constraint.population) +
                                      " distinct archs satisfy [" + std::to_string(constraint.lo()) +
                                      ", " + std::to_string(constraint.hi()) + "]");
            auto arch = sample_in_constraint(rng, supernet.spec, constraint);
            if (!seen.insert(arch.str()).second) continue;
            CandidateResult cand;
            cand.arch = arch;
            cand.params = count_params(supernet.spec, arch);
            cand.val_map = evaluate_arch(supernet, arch, eval_set, calib_set, opt);
            report.candidates.push_back(std::move(cand));
        }

        for (const auto& c : report.candidates)
            if (c.params < constraint.lo() || c.params > constraint.hi())
                throw StateError("candidate " + c.arch.str() + " escaped its parameter bounds");

        const auto better = [](const CandidateResult& a, const CandidateResult& b) {
            if (a.val_map != b.val_map) return a.val_map > b.val_map;
            if (a.params != b.params) return a.params < b.params;
            return a.arch.str() < b.arch.str();
        };
        report.winner = *std::min_element(report.candidates.begin(), report.candidates.end(),
                                          [&](const auto& a, const auto& b) { return better(a, b); });

        std::vector<double> scores;
        for (const auto& c : report.candidates) scores.push_back(c.val_map);
        report.stats = population_stats(scores);
        reports.push_back(std::move(report));
    }
    return reports;
}

nlohmann::json SearchReport::to_json() const {
    nlohmann::json jc = nlohmann::json::array();
    for (const auto& c : candidates)
        jc.push_back({{"arch", c.arch.str()}, {"params", c.params}, {"val_map", c.val_map}});
    return {{"constraint",
             {{"target_params", constraint.target_params},
              {"epsilon", constraint.epsilon},
              {"population", constraint.population}}},
            {"candidates", jc},
            {"winner",
             {{"arch", winner.arch.str()}, {"params", winner.params}, {"val_map", winner.val_map}}},
            {"stats",
             {{"min", stats.min},
              {"q1", stats.q1},
              {"median", stats.median},
              {"q3", stats.q3},
              {"max", stats.max},
              {"mean", stats.mean},
              {"stddev", stats.stddev}}}};
}

std::string SearchReport::to_csv() const {
    std::ostringstream os;
    os << "params,val_map\n";
    for (const auto& c : candidates) os << c.params << "," << c.val_map << "\n";
    return os.str();
}

std::string variance_report(const std::vector<SearchReport>& reports) {
    if (reports.empty()) throw InputError("variance report over no search reports");
    std::ostringstream os;
    os << "target_params\tepsilon\tmean\tstddev\tmin\tq1\tmedian\tq3\tmax\n";
    for (const auto& r : reports) {
        os << r.constraint.target_params << "\t" << r.constraint.epsilon << "\t" << r.stats.mean << "\t"
           << r.stats.stddev << "\t" << r.stats.min << "\t" << r.stats.q1 << "\t" << r.stats.median
           << "\t" << r.stats.q3 << "\t" << r.stats.max << "\n";
    }
    return os.str();
}

}  // namespace ofa
