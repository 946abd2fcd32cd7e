#pragma once

#include <string>
#include <vector>

#include "worldlens/env.hpp"
#include "worldlens/model.hpp"
#include "worldlens/tokenizer.hpp"

namespace worldlens::rollout {

// Behavior policy: the paddle tracks the ball center; with probability eps
// the action is replaced by a uniform random one.
env::Action policy_action(const env::GameState& st, double eps, Rng& rng);

struct Episode {
    env::Variant variant = env::Variant::bricks;
    uint64_t env_seed = 0;
    uint64_t policy_seed = 0;
    int episode_index = 0;
    std::vector<env::GameState> states;  // length n_steps+1
    std::vector<env::Action> actions;    // length n_steps
};

Episode run_episode(env::Variant variant, uint64_t env_seed, uint64_t policy_seed,
                    int episode_index, int n_steps, double eps);

// Episode i of a stream: env_seed = derive_seed(master, 2i),
// policy_seed = derive_seed(master, 2i+1). Replaying one index standalone
// reproduces the stored episode exactly.
Episode run_indexed_episode(env::Variant variant, uint64_t master_seed, int index,
                            int n_steps, double eps);

std::vector<env::Frame> render_episode(const Episode& ep);

wm::TokenizedEpisode tokenize_episode(const Episode& ep, const tok::Codebook& cb);

wm::TokenCorpus build_corpus(env::Variant variant, uint64_t master_seed, int n_episodes,
                             int n_steps, double eps, const tok::Codebook& cb);

// Episode dump: binary container (states, actions and optionally frames)
// plus a human-readable JSON sidecar at <path>.json.
void save_episode(const Episode& ep, const std::string& path, bool store_frames);
Episode load_episode(const std::string& path);

}  // namespace worldlens::rollout
