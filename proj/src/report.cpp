#include "worldlens/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace worldlens::report {

using json = nlohmann::json;

namespace {

std::string fmt(double v, const char* spec = "%.4f") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

std::string fmt_g(double v) { return fmt(v, "%.6g"); }

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

const probing::ProbeResult* find_result(const std::vector<probing::ProbeResult>& rs,
                                        const std::string& layer, const std::string& prop,
                                        const std::string& kind) {
    for (const auto& r : rs)
        if (r.layer == layer && r.property == prop && r.kind == kind && r.ok()) return &r;
    return nullptr;
}

struct Cell {
    bool present = false;
    double mean = 0, stddev = 0;
    std::string layer;
};

Cell best_cell(const std::vector<probing::ProbeResult>& rs, const std::string& prop,
               const std::vector<std::string>& order, const std::string& kind) {
    Cell c;
    try {
        std::string layer = probing::best_layer(rs, prop, order);
        if (const auto* r = find_result(rs, layer, prop, kind)) {
            c.present = true;
            c.mean = r->r2_mean;
            c.stddev = r->r2_std;
            c.layer = layer;
        }
    } catch (const Error&) {
    }
    return c;
}

// viridis-like 5-stop colormap
void colormap(double t, int& r, int& g, int& b) {
    static const double stops[5][3] = {{0.267, 0.005, 0.329},
                                       {0.229, 0.322, 0.546},
                                       {0.128, 0.567, 0.551},
                                       {0.369, 0.789, 0.383},
                                       {0.993, 0.906, 0.144}};
    t = std::clamp(t, 0.0, 1.0) * 4.0;
    int i = std::min(3, static_cast<int>(t));
    double f = t - i;
    r = static_cast<int>(255 * (stops[i][0] + f * (stops[i + 1][0] - stops[i][0])));
    g = static_cast<int>(255 * (stops[i][1] + f * (stops[i + 1][1] - stops[i][1])));
    b = static_cast<int>(255 * (stops[i][2] + f * (stops[i + 1][2] - stops[i][2])));
}

}  // namespace

SummaryTable emit_table(const TableInputs& in) {
    const std::vector<std::string> rows = {"random_model", "shuffled_labels", "raw_pixels",
                                           "trained_linear", "trained_mlp", "delta"};
    json values;
    std::map<std::string, std::map<std::string, Cell>> cells;

    for (const auto& prop : in.properties) {
        cells["random_model"][prop] = best_cell(in.random_model, prop, in.random_layer_order, "linear");
        cells["shuffled_labels"][prop] = best_cell(in.shuffled, prop, in.trained_layer_order, "linear");
        cells["raw_pixels"][prop] = best_cell(in.raw_pixels, prop, {"raw_pixels"}, "linear");
        Cell lin = best_cell(in.trained, prop, in.trained_layer_order, "linear");
        cells["trained_linear"][prop] = lin;
        Cell mlp;
        if (lin.present) {
            if (const auto* r = find_result(in.trained, lin.layer, prop, "mlp")) {
                mlp.present = true;
                mlp.mean = r->r2_mean;
                mlp.stddev = r->r2_std;
                mlp.layer = lin.layer;
            }
        }
        cells["trained_mlp"][prop] = mlp;
        Cell d;
        if (lin.present && mlp.present) {
            d.present = true;
            d.mean = mlp.mean - lin.mean;
            d.layer = lin.layer;
        }
        cells["delta"][prop] = d;
    }

    std::ostringstream csv;
    csv << "row";
    for (const auto& p : in.properties) csv << ',' << p << ',' << p << "_std," << p << "_layer";
    csv << '\n';
    for (const auto& row : rows) {
        csv << row;
        for (const auto& p : in.properties) {
            const Cell& c = cells[row][p];
            if (c.present)
                csv << ',' << fmt(c.mean, "%.9g") << ',' << fmt(c.stddev, "%.9g") << ',' << c.layer;
            else
                csv << ",,,";
        }
        csv << '\n';
    }

    std::ostringstream text;
    text << "best-layer R^2 (mean +- std over folds)\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%-16s", "");
    text << line;
    for (const auto& p : in.properties) {
        std::snprintf(line, sizeof(line), " %18s", p.c_str());
        text << line;
    }
    text << '\n';
    for (const auto& row : rows) {
        std::snprintf(line, sizeof(line), "%-16s", row.c_str());
        text << line;
        for (const auto& p : in.properties) {
            const Cell& c = cells[row][p];
            std::string s = c.present
                                ? (row == "delta" ? fmt(c.mean, "%+.4f")
                                                  : fmt(c.mean) + "+-" + fmt(c.stddev))
                                : std::string("n/a");
            std::snprintf(line, sizeof(line), " %18s", s.c_str());
            text << line;
        }
        text << '\n';
    }

    for (const auto& row : rows)
        for (const auto& p : in.properties) {
            const Cell& c = cells[row][p];
            if (c.present)
                values[row][p] = json{{"mean", c.mean}, {"std", c.stddev}, {"layer", c.layer}};
            else
                values[row][p] = nullptr;
        }

    SummaryTable out;
    out.csv = csv.str();
    out.text = text.str();
    out.values = values;
    return out;
}

std::string svg_line_plot(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series,
                          const std::vector<std::string>& x_tick_labels) {
    const double W = 760, H = 440, ml = 70, mr = 170, mt = 40, mb = 55;
    const double pw = W - ml - mr, ph = H - mt - mb;

    double xmin = std::numeric_limits<double>::max(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            double band = i < s.band.size() ? s.band[i] : 0.0;
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i] - band);
            ymax = std::max(ymax, s.y[i] + band);
        }
    if (!(xmax > xmin)) {
        xmax = xmin + 1;
    }
    if (!(ymax > ymin)) {
        ymax = ymin + 1;
    }
    double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto X = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    auto Y = [&](double y) { return mt + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"Helvetica,sans-serif\">\n";
    os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
       << title << "</text>\n";

    // axes + ticks
    os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        double v = ymin + (ymax - ymin) * i / 5.0;
        double y = Y(v);
        os << "<line x1=\"" << ml << "\" y1=\"" << fmt_g(y) << "\" x2=\"" << ml + pw
           << "\" y2=\"" << fmt_g(y) << "\" stroke=\"#ddd\"/>\n";
        os << "<text x=\"" << ml - 8 << "\" y=\"" << fmt_g(y + 4)
           << "\" text-anchor=\"end\" font-size=\"11\">" << fmt_g(v) << "</text>\n";
    }
    if (ymin < 0 && ymax > 0)
        os << "<line x1=\"" << ml << "\" y1=\"" << fmt_g(Y(0)) << "\" x2=\"" << ml + pw
           << "\" y2=\"" << fmt_g(Y(0)) << "\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n";

    if (!x_tick_labels.empty()) {
        for (size_t i = 0; i < x_tick_labels.size(); ++i) {
            double x = X(static_cast<double>(i));
            os << "<text x=\"" << fmt_g(x) << "\" y=\"" << mt + ph + 16
               << "\" text-anchor=\"middle\" font-size=\"10\">" << x_tick_labels[i]
               << "</text>\n";
        }
    } else {
        for (int i = 0; i <= 5; ++i) {
            double v = xmin + (xmax - xmin) * i / 5.0;
            os << "<text x=\"" << fmt_g(X(v)) << "\" y=\"" << mt + ph + 16
               << "\" text-anchor=\"middle\" font-size=\"11\">" << fmt_g(v) << "</text>\n";
        }
    }
    os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 14
       << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
    os << "<text x=\"18\" y=\"" << mt + ph / 2
       << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 18 "
       << mt + ph / 2 << ")\">" << y_label << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = kPalette[si % 6];
        if (!s.band.empty()) {
            std::ostringstream path;
            for (size_t i = 0; i < s.x.size(); ++i)
                path << (i ? " L" : "M") << fmt_g(X(s.x[i])) << ' ' << fmt_g(Y(s.y[i] + s.band[i]));
            for (size_t i = s.x.size(); i-- > 0;)
                path << " L" << fmt_g(X(s.x[i])) << ' ' << fmt_g(Y(s.y[i] - s.band[i]));
            os << "<path d=\"" << path.str() << " Z\" fill=\"" << color
               << "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
        }
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
        for (size_t i = 0; i < s.x.size(); ++i)
            os << fmt_g(X(s.x[i])) << ',' << fmt_g(Y(s.y[i])) << ' ';
        os << "\"/>\n";
        for (size_t i = 0; i < s.x.size(); ++i)
            os << "<circle cx=\"" << fmt_g(X(s.x[i])) << "\" cy=\"" << fmt_g(Y(s.y[i]))
               << "\" r=\"2.4\" fill=\"" << color << "\"/>\n";
        double ly = mt + 16 + 18 * static_cast<double>(si);
        os << "<line x1=\"" << ml + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << ml + pw + 34
           << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << ml + pw + 40 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">"
           << s.label << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::string svg_heatmap_panels(const std::string& title,
                               const std::vector<std::pair<std::string, UnalignedMat4>>& panels) {
    const double cell = 46, gap = 36, ml = 40, mt = 56;
    const double panel_w = 4 * cell;
    const double W = ml + panels.size() * (panel_w + gap) + 70;
    const double H = mt + panel_w + 70;

    double vmin = std::numeric_limits<double>::max(), vmax = -vmin;
    for (const auto& [label, m] : panels) {
        vmin = std::min(vmin, m.minCoeff());
        vmax = std::max(vmax, m.maxCoeff());
    }
    if (!(vmax > vmin)) vmax = vmin + 1;

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"Helvetica,sans-serif\">\n";
    os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
       << title << "</text>\n";

    for (size_t pi = 0; pi < panels.size(); ++pi) {
        double x0 = ml + pi * (panel_w + gap);
        os << "<text x=\"" << x0 + panel_w / 2 << "\" y=\"" << mt - 10
           << "\" text-anchor=\"middle\" font-size=\"12\">" << panels[pi].first << "</text>\n";
        const UnalignedMat4& m = panels[pi].second;
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) {
                int cr, cg, cb2;
                colormap((m(r, c) - vmin) / (vmax - vmin), cr, cg, cb2);
                os << "<rect x=\"" << fmt_g(x0 + c * cell) << "\" y=\"" << fmt_g(mt + r * cell)
                   << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(" << cr
                   << ',' << cg << ',' << cb2 << ")\" stroke=\"#fff\"/>\n";
                os << "<text x=\"" << fmt_g(x0 + c * cell + cell / 2) << "\" y=\""
                   << fmt_g(mt + r * cell + cell / 2 + 4)
                   << "\" text-anchor=\"middle\" font-size=\"9\" fill=\"#fff\">"
                   << fmt(m(r, c), "%.3f") << "</text>\n";
            }
    }
    // shared colorbar
    double bx = W - 54, bh = panel_w;
    for (int i = 0; i < 64; ++i) {
        int cr, cg, cb2;
        colormap(1.0 - i / 63.0, cr, cg, cb2);
        os << "<rect x=\"" << bx << "\" y=\"" << fmt_g(mt + i * bh / 64.0) << "\" width=\"14\" height=\""
           << fmt_g(bh / 64.0 + 0.5) << "\" fill=\"rgb(" << cr << ',' << cg << ',' << cb2
           << ")\"/>\n";
    }
    os << "<text x=\"" << bx + 18 << "\" y=\"" << mt + 8 << "\" font-size=\"10\">" << fmt_g(vmax)
       << "</text>\n";
    os << "<text x=\"" << bx + 18 << "\" y=\"" << mt + bh << "\" font-size=\"10\">" << fmt_g(vmin)
       << "</text>\n";
    os << "</svg>\n";
    return os.str();
}

std::string fig_probe_r2(const std::vector<probing::ProbeResult>& linear_results,
                         const std::vector<std::string>& layer_order,
                         const std::vector<std::string>& properties) {
    std::vector<Series> series;
    for (const auto& prop : properties) {
        Series s;
        s.label = prop;
        for (size_t li = 0; li < layer_order.size(); ++li) {
            if (const auto* r = find_result(linear_results, layer_order[li], prop, "linear")) {
                s.x.push_back(static_cast<double>(li));
                s.y.push_back(r->r2_mean);
                s.band.push_back(r->r2_std);
            }
        }
        series.push_back(std::move(s));
    }
    return svg_line_plot("probe R^2 across layers (linear, 5-fold CV, +-1 std)", "layer",
                         "R^2", series, layer_order);
}

std::string fig_intervention(const std::vector<intervention::SweepOutput>& sweeps) {
    std::vector<Series> series;
    for (const auto& sw : sweeps) {
        Series s;
        s.label = sw.property + " (r=" + fmt(sw.correlation.pearson_r, "%.3f") + ")";
        for (const auto& r : sw.results) {
            s.x.push_back(r.alpha);
            s.y.push_back(r.kl_mean);
            s.band.push_back(r.kl_std);
        }
        series.push_back(std::move(s));
    }
    std::string layer = sweeps.empty() ? "?" : sweeps.front().layer;
    return svg_line_plot("prediction shift vs patch strength (" + layer + ")",
                         "alpha (sigma units)", "mean KL (nats)", series, {});
}

std::string fig_ablation(const analysis::AblationOutput& out) {
    std::vector<std::pair<std::string, UnalignedMat4>> panels;
    for (const std::string baseline : {"zero", "mean", "random"}) {
        UnalignedMat4 m = UnalignedMat4::Zero();
        for (const auto& r : out.results)
            if (r.baseline == baseline)
                m(r.position / 4, r.position % 4) = r.kl_mean;
        panels.emplace_back(baseline, m);
    }
    return svg_heatmap_panels("token ablation: mean KL per position", panels);
}

}  // namespace worldlens::report
