#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "worldlens/common.hpp"

namespace worldlens::env {

// Two deterministic toy games on a 32x32 grayscale grid:
//   bricks — Breakout-like: horizontal paddle at the bottom, a wall of
//            bricks near the top, score counts destroyed bricks.
//   rally  — Pong-like: player paddle on the left, scripted enemy paddle on
//            the right, score counts balls that pass the enemy.
//
// Geometry (x = column, y = row, origin top-left, y grows downward):
//   frame          32 x 32, pixel values in [0, 1], background 0.0
//   ball           2 x 2 square (value 1.0), (ball_x, ball_y) = top-left pixel
//   bricks paddle  6 x 1 at row 30, paddle_x in [0, 26]
//   rally paddles  1 x 6, player at column 1, enemy at column 30,
//                  paddle_y / enemy_y in [0, 26] (top pixel)
//   bricks wall    2 rows x 8 columns of 4x2-pixel bricks covering rows 2-5
//                  (the top patch row, next to the score glyph), value 0.6
//   score glyph    binary strip in the top-left 8x8 patch: bit k of
//                  (score & 0xFF) lights pixels (rows 0-1, column k)
//
// Dynamics, applied in this order by step():
//   1. player paddle moves by +-2 pixels (action), clamped to its range
//   2. rally only: on even steps the enemy paddle moves 1 pixel toward the
//      ball center, clamped
//   3. the ball advances by (vx, vy), then collisions resolve:
//      top/bottom (rally) or top (bricks) wall reflection, side wall
//      reflection (bricks), paddle reflection, brick destruction
//      (+1 score, vy flips, one brick per step), goal / bottom-loss
//      re-serve per the documented schedule below
//   4. step counter increments
//
// Velocities are +-1 pixel/step on each axis and only change sign, so
// |vx| and |vy| are invariant within an episode segment.
//
// Start and re-serve schedule (documented so tests can enumerate it):
//   reset:    mix = splitmix64(seed)
//   re-serve: mix = splitmix64(splitmix64(rng_seed) ^ (step + 1))
//   bricks: ball = (12 + (mix & 7), 16), vx = +1 if (mix>>3)&1 else -1, vy = -1
//   rally:  ball = (15, 12 + (mix & 7)), vx = +1 if (mix>>3)&1 else -1,
//           vy = +1 if (mix>>4)&1 else -1
//   paddles start centered: paddle_x = 13 (bricks), paddle_y = enemy_y = 13.

enum class Variant { bricks, rally };
enum class Action { neg = 0, stay = 1, pos = 2 };  // neg = left/up, pos = right/down

constexpr int kFrameW = 32;
constexpr int kFrameH = 32;
constexpr int kBallSize = 2;
constexpr int kPaddleLen = 6;
constexpr int kPaddleSpeed = 2;
constexpr int kEpisodeLen = 256;
constexpr int kBricksPaddleRow = 30;
constexpr int kRallyPlayerCol = 1;
constexpr int kRallyEnemyCol = 30;
constexpr int kBrickRows = 2;
constexpr int kBrickCols = 8;
constexpr int kBrickTopRow = 2;
constexpr float kBrickValue = 0.6f;

Variant variant_from_string(const std::string& name);
std::string variant_name(Variant v);

struct GameState {
    Variant variant = Variant::bricks;
    float ball_x = 0, ball_y = 0;
    float ball_vx = 0, ball_vy = 0;
    float paddle_x = 0;                // bricks
    float paddle_y = 0, enemy_y = 0;   // rally
    uint32_t bricks_alive = 0;         // 16-bit mask, bit r*8+c (bricks only)
    int score = 0;
    int step = 0;
    uint64_t rng_seed = 0;
};

struct Frame {
    int width = kFrameW;
    int height = kFrameH;
    std::vector<float> pixels;  // row-major, size width*height

    float at(int row, int col) const { return pixels[static_cast<size_t>(row) * width + col]; }
    float& at(int row, int col) { return pixels[static_cast<size_t>(row) * width + col]; }
};

struct PropertyVector {
    std::vector<std::string> names;
    std::vector<double> values;

    double at(const std::string& name) const;
};

std::vector<std::string> property_names(Variant v);

GameState reset(Variant variant, uint64_t seed);
GameState step(const GameState& state, Action action);
Frame render(const GameState& state);
PropertyVector ground_truth(const GameState& state);

// Row/column bounds of the score-glyph strip, for locality tests.
struct Region { int row0, row1, col0, col1; };  // inclusive
Region score_glyph_region();

}  // namespace worldlens::env
