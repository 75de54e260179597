#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mpmnet/attacks.hpp"

namespace mpmnet::report {

// 6 significant digits, the serialization width of every emitted number.
std::string fmt6(double v);

// Curve rows (accuracy in percent) and the per-example distance table.
void write_attack_csv(const std::string& curves_path, const std::string& examples_path,
                      const attack::AttackReport& rep);
attack::AttackReport read_attack_csv(const std::string& curves_path, const std::string& examples_path);

// Accuracy-vs-epsilon plot, one polyline per (source,target) pair.
void write_fgsm_svg(const std::string& path, const attack::AttackReport& rep);

void write_metrics_csv(const std::string& path, const std::vector<std::pair<std::string, double>>& rows);

std::uint64_t fnv1a_file(const std::string& path);

}  // namespace mpmnet::report
