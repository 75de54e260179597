#include "mpmnet/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace mpmnet::ckpt {

namespace fs = std::filesystem;

namespace {

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_tensor(const fs::path& dir, const std::string& name, const Tensor& t, std::ofstream& manifest) {
    manifest << name << " f64";
    for (auto d : t.shape()) manifest << ' ' << d;
    manifest << '\n';
    std::ofstream f(dir / (name + ".bin"), std::ios::binary);
    if (!f) throw FormatError("cannot write tensor file for '" + name + "'");
    f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel()) * 8);
}

Tensor read_tensor(const fs::path& dir, const std::string& name, const Shape& shape) {
    std::ifstream f(dir / (name + ".bin"), std::ios::binary);
    if (!f) throw FormatError("missing tensor file '" + name + ".bin'");
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel()) * 8);
    if (f.gcount() != static_cast<std::streamsize>(t.numel()) * 8 || f.peek() != EOF)
        throw FormatError("tensor file '" + name + ".bin' does not match its manifest shape");
    return t;
}

std::map<std::string, std::string> read_kv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("missing checkpoint file " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("bad line in " + path.string() + ": " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key, const fs::path& p) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("missing key '" + key + "' in " + p.string());
    return it->second;
}

}  // namespace

void save(const BinaryModel& m, const std::string& dir) {
    fs::create_directories(dir);
    const fs::path d(dir);
    std::ofstream manifest(d / "manifest.txt");
    if (!manifest) throw FormatError("cannot write " + (d / "manifest.txt").string());
    for (const auto& [name, t] : m.params.tensors) write_tensor(d, name, t, manifest);
    if (m.solution.has_value()) write_tensor(d, "solution.a_star", m.solution->a_star, manifest);
    if (m.frozen_stats.has_value()) {
        write_tensor(d, "stats.mean_x", m.frozen_stats->mean_x, manifest);
        write_tensor(d, "stats.mean_y", m.frozen_stats->mean_y, manifest);
        write_tensor(d, "stats.cov_x", m.frozen_stats->cov_x, manifest);
        write_tensor(d, "stats.cov_y", m.frozen_stats->cov_y, manifest);
    }

    std::ofstream head(d / "head.txt");
    if (!head) throw FormatError("cannot write " + (d / "head.txt").string());
    head << "dataset=" << net::to_string(m.arch.dataset) << '\n';
    head << "head=" << net::to_string(m.arch.head) << '\n';
    head << "positive_digit=" << m.positive_digit << '\n';
    head << "lambda=" << fmt17(m.lambda) << '\n';
    if (m.solution.has_value()) {
        head << "b_star=" << fmt17(m.solution->b_star) << '\n';
        head << "alpha_star=" << fmt17(m.solution->alpha_star) << '\n';
    }
    if (m.frozen_stats.has_value()) {
        head << "n_x=" << m.frozen_stats->n_x << '\n';
        head << "n_y=" << m.frozen_stats->n_y << '\n';
    }
}

BinaryModel load(const std::string& dir) {
    const fs::path d(dir);
    std::ifstream manifest(d / "manifest.txt");
    if (!manifest) throw FormatError("missing checkpoint manifest in " + dir);
    std::map<std::string, Tensor> tensors;
    std::vector<std::string> order;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string name, dtype;
        ss >> name >> dtype;
        if (name.empty() || dtype != "f64") throw FormatError("bad manifest line: " + line);
        Shape shape;
        std::int64_t dim;
        while (ss >> dim) shape.push_back(dim);
        if (ss.fail() && !ss.eof()) throw FormatError("bad manifest line: " + line);
        tensors.emplace(name, read_tensor(d, name, shape));
        order.push_back(name);
    }

    auto kv = read_kv(d / "head.txt");
    BinaryModel m;
    m.arch = net::build_arch(net::parse_dataset_kind(need(kv, "dataset", d / "head.txt")),
                             net::parse_head_kind(need(kv, "head", d / "head.txt")));
    m.positive_digit = std::stoi(need(kv, "positive_digit", d / "head.txt"));
    m.lambda = std::stod(need(kv, "lambda", d / "head.txt"));

    for (const auto& name : order) {
        if (name.rfind("solution.", 0) == 0 || name.rfind("stats.", 0) == 0) continue;
        m.params.tensors.emplace_back(name, tensors.at(name));
    }
    if (tensors.count("solution.a_star")) {
        mpm::MpmSolution sol;
        sol.a_star = tensors.at("solution.a_star");
        sol.b_star = std::stod(need(kv, "b_star", d / "head.txt"));
        sol.alpha_star = std::stod(need(kv, "alpha_star", d / "head.txt"));
        m.solution = std::move(sol);
    }
    if (tensors.count("stats.mean_x")) {
        mpm::ClassStats st;
        st.mean_x = tensors.at("stats.mean_x");
        st.mean_y = tensors.at("stats.mean_y");
        st.cov_x = tensors.at("stats.cov_x");
        st.cov_y = tensors.at("stats.cov_y");
        st.n_x = std::stoll(need(kv, "n_x", d / "head.txt"));
        st.n_y = std::stoll(need(kv, "n_y", d / "head.txt"));
        m.frozen_stats = std::move(st);
    }

    // cross-check against the architecture's own parameter inventory
    std::mt19937_64 rng(0);
    auto ref = net::init_params(m.arch, rng);
    if (ref.tensors.size() != m.params.tensors.size()) throw FormatError("checkpoint parameter list mismatch");
    for (std::size_t i = 0; i < ref.tensors.size(); ++i) {
        if (ref.tensors[i].first != m.params.tensors[i].first ||
            ref.tensors[i].second.shape() != m.params.tensors[i].second.shape())
            throw FormatError("checkpoint parameter '" + m.params.tensors[i].first + "' does not match the architecture");
    }
    return m;
}

}  // namespace mpmnet::ckpt
