#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "worldlens/analysis.hpp"
#include "worldlens/intervention.hpp"
#include "worldlens/probing.hpp"

namespace worldlens::report {

// Best-layer summary table: control rows plus trained linear/MLP rows and
// the selectivity-gap row, one column per property.
struct TableInputs {
    std::vector<std::string> properties;
    std::vector<std::string> trained_layer_order;
    std::vector<std::string> random_layer_order;
    std::vector<probing::ProbeResult> trained;       // linear everywhere + mlp at best layers
    std::vector<probing::ProbeResult> random_model;  // linear
    std::vector<probing::ProbeResult> shuffled;      // linear
    std::vector<probing::ProbeResult> raw_pixels;    // linear
};

struct SummaryTable {
    std::string csv;
    std::string text;
    nlohmann::json values;  // row -> property -> {mean, std, layer}
};

SummaryTable emit_table(const TableInputs& in);

// Deterministic SVG emitters (same input bytes -> same output bytes).
struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    std::vector<double> band;  // +-1 band half-width; empty for none
};

std::string svg_line_plot(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series,
                          const std::vector<std::string>& x_tick_labels = {});

using UnalignedMat4 = Eigen::Matrix<double, 4, 4, Eigen::DontAlign>;
std::string svg_heatmap_panels(const std::string& title,
                               const std::vector<std::pair<std::string, UnalignedMat4>>& panels);

// Figure builders used by the report stage.
std::string fig_probe_r2(const std::vector<probing::ProbeResult>& linear_results,
                         const std::vector<std::string>& layer_order,
                         const std::vector<std::string>& properties);
std::string fig_intervention(const std::vector<intervention::SweepOutput>& sweeps);
std::string fig_ablation(const analysis::AblationOutput& out);

}  // namespace worldlens::report
