#include "worldlens/rollout.hpp"

#include <nlohmann/json.hpp>

#include "worldlens/array_file.hpp"

namespace worldlens::rollout {

using json = nlohmann::json;

env::Action policy_action(const env::GameState& st, double eps, Rng& rng) {
    if (eps > 0 && rng.uniform() < eps)
        return static_cast<env::Action>(rng.uniform_int(3));
    double ball_c, paddle_c;
    if (st.variant == env::Variant::bricks) {
        ball_c = st.ball_x + env::kBallSize / 2.0;
        paddle_c = st.paddle_x + env::kPaddleLen / 2.0;
    } else {
        ball_c = st.ball_y + env::kBallSize / 2.0;
        paddle_c = st.paddle_y + env::kPaddleLen / 2.0;
    }
    if (ball_c < paddle_c - 1.0) return env::Action::neg;
    if (ball_c > paddle_c + 1.0) return env::Action::pos;
    return env::Action::stay;
}

Episode run_episode(env::Variant variant, uint64_t env_seed, uint64_t policy_seed,
                    int episode_index, int n_steps, double eps) {
    Episode ep;
    ep.variant = variant;
    ep.env_seed = env_seed;
    ep.policy_seed = policy_seed;
    ep.episode_index = episode_index;
    ep.states.reserve(n_steps + 1);
    ep.actions.reserve(n_steps);

    Rng rng(policy_seed);
    env::GameState st = env::reset(variant, env_seed);
    ep.states.push_back(st);
    for (int t = 0; t < n_steps; ++t) {
        env::Action a = policy_action(st, eps, rng);
        st = env::step(st, a);
        ep.actions.push_back(a);
        ep.states.push_back(st);
    }
    return ep;
}

Episode run_indexed_episode(env::Variant variant, uint64_t master_seed, int index,
                            int n_steps, double eps) {
    return run_episode(variant, derive_seed(master_seed, 2 * static_cast<uint64_t>(index)),
                       derive_seed(master_seed, 2 * static_cast<uint64_t>(index) + 1),
                       index, n_steps, eps);
}

std::vector<env::Frame> render_episode(const Episode& ep) {
    std::vector<env::Frame> frames;
    frames.reserve(ep.states.size());
    for (const auto& st : ep.states) frames.push_back(env::render(st));
    return frames;
}

wm::TokenizedEpisode tokenize_episode(const Episode& ep, const tok::Codebook& cb) {
    wm::TokenizedEpisode te;
    te.env_seed = ep.env_seed;
    te.episode_index = ep.episode_index;
    te.frames.reserve(ep.states.size());
    te.actions.reserve(ep.actions.size());
    for (const auto& st : ep.states) te.frames.push_back(tok::encode(env::render(st), cb));
    for (auto a : ep.actions) te.actions.push_back(static_cast<uint8_t>(a));
    return te;
}

wm::TokenCorpus build_corpus(env::Variant variant, uint64_t master_seed, int n_episodes,
                             int n_steps, double eps, const tok::Codebook& cb) {
    wm::TokenCorpus corpus;
    corpus.variant = env::variant_name(variant);
    corpus.codebook_size = cb.K;
    corpus.n_actions = 3;
    corpus.codebook_hash = cb.content_hash();
    corpus.episodes.resize(n_episodes);
    parallel_for(n_episodes, [&](size_t i) {
        Episode ep = run_indexed_episode(variant, master_seed, static_cast<int>(i), n_steps, eps);
        corpus.episodes[i] = tokenize_episode(ep, cb);
    });
    return corpus;
}

void save_episode(const Episode& ep, const std::string& path, bool store_frames) {
    const size_t n = ep.states.size();
    std::vector<float> sf(n * 7);
    std::vector<int32_t> si(n * 3);
    for (size_t i = 0; i < n; ++i) {
        const auto& s = ep.states[i];
        sf[i * 7 + 0] = s.ball_x;
        sf[i * 7 + 1] = s.ball_y;
        sf[i * 7 + 2] = s.ball_vx;
        sf[i * 7 + 3] = s.ball_vy;
        sf[i * 7 + 4] = s.paddle_x;
        sf[i * 7 + 5] = s.paddle_y;
        sf[i * 7 + 6] = s.enemy_y;
        si[i * 3 + 0] = s.score;
        si[i * 3 + 1] = s.step;
        si[i * 3 + 2] = static_cast<int32_t>(s.bricks_alive);
    }
    std::vector<int32_t> acts(ep.actions.size());
    for (size_t i = 0; i < ep.actions.size(); ++i) acts[i] = static_cast<int32_t>(ep.actions[i]);

    ArrayFile f;
    json meta;
    meta["kind"] = "episode";
    meta["version"] = 1;
    meta["variant"] = env::variant_name(ep.variant);
    meta["env_seed"] = ep.env_seed;
    meta["policy_seed"] = ep.policy_seed;
    meta["episode_index"] = ep.episode_index;
    meta["length"] = ep.actions.size();
    meta["store_frames"] = store_frames;
    meta["state_f32_fields"] = {"ball_x", "ball_y", "ball_vx", "ball_vy",
                                "paddle_x", "paddle_y", "enemy_y"};
    meta["state_i32_fields"] = {"score", "step", "bricks_alive"};
    f.set_meta(meta);
    f.add_f32("states_f32", {static_cast<int64_t>(n), 7}, sf.data());
    f.add_i32("states_i32", {static_cast<int64_t>(n), 3}, si.data());
    f.add_i32("actions", {static_cast<int64_t>(acts.size())}, acts.data());
    if (store_frames) {
        std::vector<float> px;
        px.reserve(n * env::kFrameW * env::kFrameH);
        for (const auto& st : ep.states) {
            env::Frame fr = env::render(st);
            px.insert(px.end(), fr.pixels.begin(), fr.pixels.end());
        }
        f.add_f32("frames", {static_cast<int64_t>(n), env::kFrameH, env::kFrameW}, px.data());
    }
    f.save(path);
    write_text_file(path + ".json", meta.dump(2) + "\n");
}

Episode load_episode(const std::string& path) {
    ArrayFile f = ArrayFile::load(path);
    json meta = f.meta();
    if (meta.value("kind", "") != "episode") throw DataError("not an episode file: " + path);
    Episode ep;
    ep.variant = env::variant_from_string(meta.at("variant").get<std::string>());
    ep.env_seed = meta.at("env_seed").get<uint64_t>();
    ep.policy_seed = meta.at("policy_seed").get<uint64_t>();
    ep.episode_index = meta.at("episode_index").get<int>();

    auto sf = f.f32("states_f32");
    auto si = f.i32("states_i32");
    size_t n = sf.size() / 7;
    ep.states.resize(n);
    for (size_t i = 0; i < n; ++i) {
        auto& s = ep.states[i];
        s.variant = ep.variant;
        s.rng_seed = ep.env_seed;
        s.ball_x = sf[i * 7 + 0];
        s.ball_y = sf[i * 7 + 1];
        s.ball_vx = sf[i * 7 + 2];
        s.ball_vy = sf[i * 7 + 3];
        s.paddle_x = sf[i * 7 + 4];
        s.paddle_y = sf[i * 7 + 5];
        s.enemy_y = sf[i * 7 + 6];
        s.score = si[i * 3 + 0];
        s.step = si[i * 3 + 1];
        s.bricks_alive = static_cast<uint32_t>(si[i * 3 + 2]);
    }
    auto acts = f.i32("actions");
    ep.actions.reserve(acts.size());
    for (int32_t a : acts) ep.actions.push_back(static_cast<env::Action>(a));
    return ep;
}

}  // namespace worldlens::rollout
