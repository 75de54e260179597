#include "mpmnet/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mpmnet::report {

std::string fmt6(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot write '" + path + "'");
    return f;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open '" + path + "'");
    return f;
}

}  // namespace

void write_attack_csv(const std::string& curves_path, const std::string& examples_path,
                      const attack::AttackReport& rep) {
    auto fc = open_out(curves_path);
    fc << "attack,source,target,eps_or_c,accuracy_pct\n";
    for (const auto& r : rep.curves)
        fc << rep.attack << ',' << r.source << ',' << r.target << ',' << fmt6(r.x) << ',' << fmt6(100.0 * r.accuracy)
           << '\n';
    auto fe = open_out(examples_path);
    fe << "attack,source,index,eps_or_c,success,l2,linf\n";
    for (const auto& e : rep.examples)
        fe << rep.attack << ',' << e.source << ',' << e.index << ',' << fmt6(e.x) << ',' << (e.success ? 1 : 0) << ','
           << fmt6(e.l2) << ',' << fmt6(e.linf) << '\n';
}

attack::AttackReport read_attack_csv(const std::string& curves_path, const std::string& examples_path) {
    attack::AttackReport rep;
    auto fc = open_in(curves_path);
    std::string line;
    if (!std::getline(fc, line) || split_csv(line).size() != 5)
        throw FormatError("bad curve CSV header in " + curves_path);
    while (std::getline(fc, line)) {
        if (line.empty()) continue;
        auto f = split_csv(line);
        if (f.size() != 5) throw FormatError("bad curve CSV row: " + line);
        rep.attack = f[0];
        rep.curves.push_back({f[1], f[2], std::stod(f[3]), std::stod(f[4]) / 100.0});
    }
    auto fe = open_in(examples_path);
    if (!std::getline(fe, line) || split_csv(line).size() != 7)
        throw FormatError("bad example CSV header in " + examples_path);
    while (std::getline(fe, line)) {
        if (line.empty()) continue;
        auto f = split_csv(line);
        if (f.size() != 7) throw FormatError("bad example CSV row: " + line);
        rep.examples.push_back({f[1], std::stoll(f[2]), std::stod(f[3]), f[4] == "1", std::stod(f[5]), std::stod(f[6])});
    }
    return rep;
}

void write_fgsm_svg(const std::string& path, const attack::AttackReport& rep) {
    if (rep.curves.empty()) throw EvalError("no curves to plot");
    std::vector<std::pair<std::string, std::string>> pairs;
    double xmax = 0;
    for (const auto& r : rep.curves) {
        xmax = std::max(xmax, r.x);
        std::pair<std::string, std::string> key{r.source, r.target};
        if (std::find(pairs.begin(), pairs.end(), key) == pairs.end()) pairs.push_back(key);
    }
    if (xmax <= 0) xmax = 1;
    const double w = 640, h = 440, ml = 60, mr = 20, mt = 20, mb = 50;
    const double pw = w - ml - mr, ph = h - mt - mb;
    auto px = [&](double x) { return ml + pw * x / xmax; };
    auto py = [&](double a) { return mt + ph * (1.0 - a); };
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"};

    auto f = open_out(path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    f << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double a = i / 5.0;
        f << "<text x=\"" << ml - 8 << "\" y=\"" << py(a) + 4 << "\" font-size=\"11\" text-anchor=\"end\">"
          << fmt6(100 * a) << "</text>\n";
        f << "<text x=\"" << px(a * xmax) << "\" y=\"" << mt + ph + 18
          << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt6(a * xmax) << "</text>\n";
    }
    f << "<text x=\"" << ml + pw / 2 << "\" y=\"" << h - 12 << "\" font-size=\"12\" text-anchor=\"middle\">epsilon</text>\n";
    f << "<text x=\"16\" y=\"" << mt + ph / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << mt + ph / 2 << ")\">accuracy (%)</text>\n";

    for (std::size_t p = 0; p < pairs.size(); ++p) {
        f << "<polyline fill=\"none\" stroke=\"" << colors[p % 6] << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& r : rep.curves)
            if (r.source == pairs[p].first && r.target == pairs[p].second)
                f << fmt6(px(r.x)) << ',' << fmt6(py(r.accuracy)) << ' ';
        f << "\"/>\n";
        f << "<text x=\"" << ml + pw - 180 << "\" y=\"" << mt + 16 + 16 * static_cast<double>(p)
          << "\" font-size=\"11\" fill=\"" << colors[p % 6] << "\">" << pairs[p].first << " -> " << pairs[p].second
          << "</text>\n";
    }
    f << "</svg>\n";
}

void write_metrics_csv(const std::string& path, const std::vector<std::pair<std::string, double>>& rows) {
    auto f = open_out(path);
    f << "metric,value\n";
    for (const auto& [k, v] : rows) f << k << ',' << fmt6(v) << '\n';
}

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open '" + path + "' for hashing");
    std::uint64_t h = 1469598103934665603ull;
    char buf[1 << 16];
    while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    return h;
}

}  // namespace mpmnet::report
