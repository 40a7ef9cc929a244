#pragma once

// Procedural face-like images for desk-scale runs, and loading a directory
// of ground-truth PNGs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ented/image_io.hpp"
#include "ented/numerics/rng.hpp"

namespace ented::toy {

namespace detail {

struct Ellipse {
    double cx, cy, rx, ry;
    bool inside(double x, double y) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return dx * dx + dy * dy <= 1.0;
    }
};

struct Rgb {
    double r, g, b;
};

}  // namespace detail

/// One face: background gradient, hair, skin ellipse, eyes with pupils,
/// brows and a mouth. Rendered with 4×4 supersampling.
template <class T>
Tensor<T> face(std::size_t res, std::uint64_t seed) {
    using detail::Ellipse;
    using detail::Rgb;
    Rng rng(seed);
    auto u = [&](double lo, double hi) { return rng.uniform(lo, hi); };
    const Rgb bg_top{u(0.2, 0.9), u(0.2, 0.9), u(0.2, 0.9)};
    const Rgb bg_bottom{u(0.1, 0.7), u(0.1, 0.7), u(0.1, 0.7)};
    const double tone = u(0.35, 0.95);
    const Rgb skin{tone, tone * u(0.7, 0.85), tone * u(0.55, 0.7)};
    const double hair_v = u(0.05, 0.6);
    const Rgb hair{hair_v, hair_v * u(0.6, 0.9), hair_v * u(0.3, 0.7)};
    const Rgb iris{u(0.05, 0.4), u(0.1, 0.5), u(0.1, 0.6)};
    const Rgb lips{u(0.6, 0.9), u(0.2, 0.4), u(0.25, 0.45)};

    const double cx = 0.5 + u(-0.05, 0.05), cy = 0.55 + u(-0.04, 0.04);
    const Ellipse head{cx, cy, u(0.26, 0.33), u(0.33, 0.4)};
    const Ellipse hair_cap{cx, cy - head.ry * 0.35, head.rx * 1.12, head.ry * 0.85};
    const double eye_dx = head.rx * u(0.38, 0.48), eye_y = cy - head.ry * u(0.08, 0.18);
    const double eye_rx = head.rx * u(0.16, 0.22), eye_ry = eye_rx * u(0.45, 0.7);
    const Ellipse eyes[2] = {{cx - eye_dx, eye_y, eye_rx, eye_ry}, {cx + eye_dx, eye_y, eye_rx, eye_ry}};
    const double pupil = eye_ry * u(0.7, 0.95);
    const Ellipse pupils[2] = {{eyes[0].cx, eye_y, pupil, pupil}, {eyes[1].cx, eye_y, pupil, pupil}};
    const double brow_y = eye_y - eye_ry * u(1.8, 2.6);
    const Ellipse brows[2] = {{eyes[0].cx, brow_y, eye_rx * 1.1, eye_ry * 0.35},
                              {eyes[1].cx, brow_y, eye_rx * 1.1, eye_ry * 0.35}};
    const Ellipse mouth{cx, cy + head.ry * u(0.45, 0.6), head.rx * u(0.3, 0.45), head.ry * u(0.06, 0.12)};
    const Ellipse nose{cx, cy + head.ry * u(0.12, 0.22), head.rx * 0.09, head.ry * 0.16};

    auto shade = [&](double x, double y) -> Rgb {
        Rgb c{bg_top.r + (bg_bottom.r - bg_top.r) * y, bg_top.g + (bg_bottom.g - bg_top.g) * y,
              bg_top.b + (bg_bottom.b - bg_top.b) * y};
        if (hair_cap.inside(x, y)) c = hair;
        if (head.inside(x, y) && !(hair_cap.inside(x, y) && y < cy - head.ry * 0.55)) {
            // Mild shading toward the rim gives the skin some low-frequency structure.
            const double dx = (x - head.cx) / head.rx, dy = (y - head.cy) / head.ry;
            const double k = 1.0 - 0.25 * (dx * dx + dy * dy);
            c = {skin.r * k, skin.g * k, skin.b * k};
            if (nose.inside(x, y)) c = {skin.r * 0.8, skin.g * 0.8, skin.b * 0.8};
            for (int e = 0; e < 2; ++e) {
                if (brows[e].inside(x, y)) c = hair;
                if (eyes[e].inside(x, y)) c = {0.95, 0.95, 0.92};
                if (pupils[e].inside(x, y) && eyes[e].inside(x, y)) c = iris;
            }
            if (mouth.inside(x, y)) c = lips;
        }
        return c;
    };

    constexpr int ss = 4;
    Tensor<T> img({3, res, res});
    for (std::size_t py = 0; py < res; ++py)
        for (std::size_t px = 0; px < res; ++px) {
            Rgb acc{0, 0, 0};
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double x = (px + (sx + 0.5) / ss) / res, y = (py + (sy + 0.5) / ss) / res;
                    const Rgb c = shade(x, y);
                    acc.r += c.r;
                    acc.g += c.g;
                    acc.b += c.b;
                }
            img.at(0, py, px) = static_cast<T>(std::clamp(acc.r / (ss * ss), 0.0, 1.0));
            img.at(1, py, px) = static_cast<T>(std::clamp(acc.g / (ss * ss), 0.0, 1.0));
            img.at(2, py, px) = static_cast<T>(std::clamp(acc.b / (ss * ss), 0.0, 1.0));
        }
    return img;
}

/// `count` faces on the 8-bit grid, so writing and re-reading them is lossless.
template <class T>
std::vector<Tensor<T>> faces(std::size_t count, std::size_t res, std::uint64_t seed) {
    std::vector<Tensor<T>> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(image_io::quantize8(face<T>(res, Rng::mix(seed) + i)));
    return out;
}

/// Every *.png in `dir`, in file-name order.
template <class T>
std::vector<Tensor<T>> load_dir(const std::string& dir, std::size_t res, std::vector<std::string>* names = nullptr) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("dataset directory has no PNG images: " + dir);
    std::vector<Tensor<T>> out;
    for (const auto& f : files) {
        auto img = image_io::read_png<T>(f.string());
        if (img.dim(1) != res || img.dim(2) != res) {
            throw DimensionError(f.string() + ": expected " + std::to_string(res) + "x" + std::to_string(res) +
                                 ", got " + shape_str(img.shape()));
        }
        out.push_back(std::move(img));
        if (names) names->push_back(f.filename().string());
    }
    return out;
}

}  // namespace ented::toy
