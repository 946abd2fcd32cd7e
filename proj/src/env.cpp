#include "worldlens/env.hpp"

#include <algorithm>
#include <cmath>

namespace worldlens::env {

namespace {

constexpr int kBallMaxX = kFrameW - kBallSize;   // 30
constexpr int kBallMaxY = kFrameH - kBallSize;   // 30
constexpr int kPaddleMaxX = kFrameW - kPaddleLen;  // 26
constexpr int kPaddleMaxY = kFrameH - kPaddleLen;  // 26

struct Serve {
    float x, y, vx, vy;
};

Serve serve_from_mix(Variant variant, uint64_t mix) {
    Serve s;
    if (variant == Variant::bricks) {
        s.x = static_cast<float>(12 + (mix & 7));
        s.y = 16.0f;
        s.vx = ((mix >> 3) & 1) ? 1.0f : -1.0f;
        s.vy = -1.0f;
    } else {
        s.x = 15.0f;
        s.y = static_cast<float>(12 + (mix & 7));
        s.vx = ((mix >> 3) & 1) ? 1.0f : -1.0f;
        s.vy = ((mix >> 4) & 1) ? 1.0f : -1.0f;
    }
    return s;
}

void apply_serve(GameState& st, const Serve& s) {
    st.ball_x = s.x;
    st.ball_y = s.y;
    st.ball_vx = s.vx;
    st.ball_vy = s.vy;
}

bool overlap(int a0, int a1, int b0, int b1) { return a1 >= b0 && a0 <= b1; }

int paddle_delta(Action a) {
    switch (a) {
        case Action::neg: return -kPaddleSpeed;
        case Action::stay: return 0;
        case Action::pos: return kPaddleSpeed;
    }
    throw ConfigError("invalid action");
}

void step_bricks(GameState& st, Action action) {
    st.paddle_x = static_cast<float>(
        std::clamp(static_cast<int>(st.paddle_x) + paddle_delta(action), 0, kPaddleMaxX));

    int x = static_cast<int>(st.ball_x) + static_cast<int>(st.ball_vx);
    int y = static_cast<int>(st.ball_y) + static_cast<int>(st.ball_vy);

    if (x < 0) { x = -x; st.ball_vx = 1.0f; }
    if (x > kBallMaxX) { x = 2 * kBallMaxX - x; st.ball_vx = -1.0f; }
    if (y < 0) { y = -y; st.ball_vy = 1.0f; }

    // brick collision: one brick per step, row-major priority
    if (st.bricks_alive != 0) {
        for (int r = 0; r < kBrickRows; ++r) {
            bool hit = false;
            for (int c = 0; c < kBrickCols; ++c) {
                uint32_t bit = 1u << (r * kBrickCols + c);
                if (!(st.bricks_alive & bit)) continue;
                int br0 = kBrickTopRow + 2 * r, br1 = br0 + 1;
                int bc0 = 4 * c, bc1 = bc0 + 3;
                if (overlap(y, y + 1, br0, br1) && overlap(x, x + 1, bc0, bc1)) {
                    st.bricks_alive &= ~bit;
                    st.score += 1;
                    st.ball_vy = -st.ball_vy;
                    if (st.bricks_alive == 0) st.bricks_alive = 0xFFFFu;  // new wall
                    hit = true;
                    break;
                }
            }
            if (hit) break;
        }
    }

    // paddle / bottom
    if (st.ball_vy > 0 && y + 1 >= kBricksPaddleRow) {
        int px = static_cast<int>(st.paddle_x);
        if (overlap(x, x + 1, px, px + kPaddleLen - 1) && y + 1 == kBricksPaddleRow) {
            y = kBricksPaddleRow - kBallSize;  // rest just above the paddle
            st.ball_vy = -1.0f;
        } else if (y > kBallMaxY) {
            apply_serve(st, serve_from_mix(st.variant,
                splitmix64(splitmix64(st.rng_seed) ^ static_cast<uint64_t>(st.step + 1))));
            st.step += 1;
            return;
        }
    }

    st.ball_x = static_cast<float>(x);
    st.ball_y = static_cast<float>(y);
    st.step += 1;
}

void step_rally(GameState& st, Action action) {
    st.paddle_y = static_cast<float>(
        std::clamp(static_cast<int>(st.paddle_y) + paddle_delta(action), 0, kPaddleMaxY));

    if (st.step % 2 == 0) {
        int ey = static_cast<int>(st.enemy_y);
        int target = static_cast<int>(st.ball_y) - 2;  // align paddle center with ball
        if (target > ey) ey += 1;
        else if (target < ey) ey -= 1;
        st.enemy_y = static_cast<float>(std::clamp(ey, 0, kPaddleMaxY));
    }

    int x = static_cast<int>(st.ball_x) + static_cast<int>(st.ball_vx);
    int y = static_cast<int>(st.ball_y) + static_cast<int>(st.ball_vy);

    if (y < 0) { y = -y; st.ball_vy = 1.0f; }
    if (y > kBallMaxY) { y = 2 * kBallMaxY - y; st.ball_vy = -1.0f; }

    auto reserve = [&st]() {
        apply_serve(st, serve_from_mix(st.variant,
            splitmix64(splitmix64(st.rng_seed) ^ static_cast<uint64_t>(st.step + 1))));
        st.step += 1;
    };

    if (st.ball_vx < 0 && x <= kRallyPlayerCol + 1) {
        int py = static_cast<int>(st.paddle_y);
        if (overlap(y, y + 1, py, py + kPaddleLen - 1)) {
            x = 2 * (kRallyPlayerCol + 1) - x;
            st.ball_vx = 1.0f;
        } else if (x < 0) {
            reserve();
            return;
        }
    } else if (st.ball_vx > 0 && x + 1 >= kRallyEnemyCol) {
        int ey = static_cast<int>(st.enemy_y);
        if (overlap(y, y + 1, ey, ey + kPaddleLen - 1)) {
            x = 2 * (kRallyEnemyCol - kBallSize) - x;
            st.ball_vx = -1.0f;
        } else if (x > kBallMaxX) {
            st.score += 1;  // ball got past the enemy
            reserve();
            return;
        }
    }

    st.ball_x = static_cast<float>(x);
    st.ball_y = static_cast<float>(y);
    st.step += 1;
}

}  // namespace

Variant variant_from_string(const std::string& name) {
    if (name == "bricks") return Variant::bricks;
    if (name == "rally") return Variant::rally;
    throw ConfigError("unknown variant '" + name + "' (expected 'bricks' or 'rally')");
}

std::string variant_name(Variant v) {
    return v == Variant::bricks ? "bricks" : "rally";
}

std::vector<std::string> property_names(Variant v) {
    if (v == Variant::bricks) return {"ball_x", "ball_y", "player_x", "score"};
    return {"ball_x", "ball_y", "player_y", "enemy_y"};
}

double PropertyVector::at(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return values[i];
    throw UsageError("no property named '" + name + "'");
}

GameState reset(Variant variant, uint64_t seed) {
    GameState st;
    st.variant = variant;
    st.rng_seed = seed;
    st.score = 0;
    st.step = 0;
    apply_serve(st, serve_from_mix(variant, splitmix64(seed)));
    if (variant == Variant::bricks) {
        st.paddle_x = 13.0f;
        st.bricks_alive = 0xFFFFu;
    } else {
        st.paddle_y = 13.0f;
        st.enemy_y = 13.0f;
    }
    return st;
}

GameState step(const GameState& state, Action action) {
    GameState st = state;
    if (st.variant == Variant::bricks) step_bricks(st, action);
    else step_rally(st, action);
    return st;
}

Frame render(const GameState& st) {
    Frame f;
    f.pixels.assign(static_cast<size_t>(kFrameW) * kFrameH, 0.0f);

    // score glyph: bit k of score lights pixels (0,k) and (1,k)
    for (int k = 0; k < 8; ++k) {
        if ((st.score >> k) & 1) {
            f.at(0, k) = 1.0f;
            f.at(1, k) = 1.0f;
        }
    }

    if (st.variant == Variant::bricks) {
        for (int r = 0; r < kBrickRows; ++r) {
            for (int c = 0; c < kBrickCols; ++c) {
                if (!(st.bricks_alive & (1u << (r * kBrickCols + c)))) continue;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 4; ++dx)
                        f.at(kBrickTopRow + 2 * r + dy, 4 * c + dx) = kBrickValue;
            }
        }
        int px = static_cast<int>(st.paddle_x);
        for (int dx = 0; dx < kPaddleLen; ++dx) f.at(kBricksPaddleRow, px + dx) = 1.0f;
    } else {
        int py = static_cast<int>(st.paddle_y);
        int ey = static_cast<int>(st.enemy_y);
        for (int dy = 0; dy < kPaddleLen; ++dy) {
            f.at(py + dy, kRallyPlayerCol) = 1.0f;
            f.at(ey + dy, kRallyEnemyCol) = 1.0f;
        }
    }

    int bx = static_cast<int>(st.ball_x);
    int by = static_cast<int>(st.ball_y);
    for (int dy = 0; dy < kBallSize; ++dy)
        for (int dx = 0; dx < kBallSize; ++dx)
            f.at(by + dy, bx + dx) = 1.0f;

    return f;
}

PropertyVector ground_truth(const GameState& st) {
    PropertyVector pv;
    pv.names = property_names(st.variant);
    if (st.variant == Variant::bricks) {
        pv.values = {st.ball_x, st.ball_y, st.paddle_x, static_cast<double>(st.score)};
    } else {
        pv.values = {st.ball_x, st.ball_y, st.paddle_y, st.enemy_y};
    }
    return pv;
}

Region score_glyph_region() { return Region{0, 1, 0, 7}; }

}  // namespace worldlens::env
