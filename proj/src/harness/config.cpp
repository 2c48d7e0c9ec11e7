// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "swarm/harness.hpp"
#include "swarm/rollout.hpp"

namespace swarm::harness {

namespace pt = boost::property_tree;

namespace {

// Like ptree::get with a default, but a present value that fails to convert throws.
template <class T>
T get(const pt::ptree& t, const std::string& path, const T& fallback) {
    const auto child = t.get_child_optional(path);
    return child ? child->get_value<T>() : fallback;
}

template <class K, class V, class F>
std::map<K, V> parse_pairs(const std::string& text, F&& value) {
    std::map<K, V> out;
    std::istringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
        if (item.empty()) {
            continue;
        }
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
            throw InvalidInput("expected index:value, got '" + item + "'");
        }
        out.emplace(static_cast<K>(std::stoi(item.substr(0, colon))), value(item.substr(colon + 1)));
    }
    return out;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
    pt::ptree t;
    std::istringstream in(text);
    try {
        pt::read_ini(in, t);
    } catch (const pt::ini_parser_error& e) {
        throw InvalidInput(std::string("config: ") + e.what());
    }
    RunConfig c;
    try {
        c.seed = get(t, "run.seed", c.seed);
        c.steps = get(t, "run.steps", c.steps);
        c.async_level = get(t, "run.async_level", c.async_level);
        c.out_dir = get(t, "run.out_dir", c.out_dir.string());
        c.mode = get(t, "run.mode", c.mode);
        c.timeout_seconds = get(t, "run.timeout_seconds", c.timeout_seconds);
        c.validate = get(t, "run.validate", c.validate);

        c.n_tasks = get(t, "data.n_tasks", c.n_tasks);
        c.filter.k = get(t, "data.filter_k", c.filter.k);
        c.filter.low = get(t, "data.filter_low", c.filter.low);
        c.filter.high = get(t, "data.filter_high", c.filter.high);

        c.pretrain.steps = get(t, "pretrain.steps", c.pretrain.steps);
        c.pretrain.lr = get(t, "pretrain.lr", c.pretrain.lr);
        c.pretrain.batch = get(t, "pretrain.batch", c.pretrain.batch);

        auto& tr = c.train;
        tr.lr = get(t, "train.lr", tr.lr);
        tr.kl_coef = get(t, "train.kl_coef", tr.kl_coef);
        tr.entropy_coef = get(t, "train.entropy_coef", tr.entropy_coef);
        tr.alpha = get(t, "train.alpha", tr.alpha);
        tr.epsilon = get(t, "train.epsilon", tr.epsilon);
        tr.delta = get(t, "train.delta", tr.delta);
        tr.grad_clip = get(t, "train.grad_clip", tr.grad_clip);
        tr.warmup_steps = get(t, "train.warmup_steps", tr.warmup_steps);
        tr.group_size = get(t, "train.group_size", tr.group_size);
        tr.prompts_per_step = get(t, "train.prompts_per_step", tr.prompts_per_step);
        tr.micro_steps = get(t, "train.micro_steps", tr.micro_steps);
        c.k_max = get(t, "train.k_max", c.k_max);

        c.workers = get(t, "workers.count", c.workers);
        c.groups_per_file = get(t, "workers.groups_per_file", c.groups_per_file);
        c.adversarial = parse_pairs<int, adversarial::Attack>(
            get(t, "workers.adversarial", std::string()),
            [](const std::string& v) { return adversarial::attack_from_name(v); });
        c.crash = parse_pairs<int, std::uint64_t>(
            get(t, "workers.crash", std::string()),
            [](const std::string& v) { return static_cast<std::uint64_t>(std::stoull(v)); });
        c.attack_from_step = get(t, "workers.attack_from_step", c.attack_from_step);

        c.validators = get(t, "validators.count", c.validators);
        c.q = get(t, "validators.q", c.q);

        c.relays = get(t, "relays.count", c.relays);
        c.shard_size = get(t, "relays.shard_size", c.shard_size);
        c.relay_bandwidth = get(t, "relays.bandwidth", c.relay_bandwidth);
        c.corrupt_prob = get(t, "relays.corrupt_prob", c.corrupt_prob);
        c.throttled_relays = get(t, "relays.throttled", c.throttled_relays);

        c.heartbeat_interval = get(t, "orchestrator.heartbeat_interval", c.heartbeat_interval);
        c.max_missed = get(t, "orchestrator.max_missed", c.max_missed);
    } catch (const pt::ptree_error& e) {
        throw InvalidInput(std::string("config: ") + e.what());
    }
    c.train.async_level = c.async_level;
    c.train.validate();
    if (c.steps < 1 || c.workers < 0 || c.validators < 1 || c.relays < 1 ||
        c.groups_per_file < 1 || c.n_tasks < 1) {
        throw InvalidInput("config: counts out of range");
    }
    if (c.mode != "local" && c.mode != "live") {
        throw InvalidInput("config: run.mode must be local or live");
    }
    if (static_cast<std::uint64_t>(c.async_level) > c.k_max) {
        throw InvalidInput("config: async_level exceeds the staleness window k_max");
    }
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw InvalidInput("cannot read config " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string to_ini(const RunConfig& c) {
    auto real = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::string adv, crash;
    for (const auto& [i, a] : c.adversarial) {
        adv += (adv.empty() ? "" : ",") + std::to_string(i) + ":" + std::string(adversarial::attack_name(a));
    }
    for (const auto& [i, s] : c.crash) {
        crash += (crash.empty() ? "" : ",") + std::to_string(i) + ":" + std::to_string(s);
    }
    std::ostringstream o;
    o << "[run]\nseed = " << c.seed << "\nsteps = " << c.steps << "\nasync_level = " << c.async_level
      << "\nout_dir = " << c.out_dir.string() << "\nmode = " << c.mode
      << "\ntimeout_seconds = " << real(c.timeout_seconds)
      << "\nvalidate = " << (c.validate ? "true" : "false") << "\n\n";
    o << "[data]\nn_tasks = " << c.n_tasks << "\nfilter_k = " << c.filter.k
      << "\nfilter_low = " << real(c.filter.low) << "\nfilter_high = " << real(c.filter.high) << "\n\n";
    o << "[pretrain]\nsteps = " << c.pretrain.steps << "\nlr = " << real(c.pretrain.lr)
      << "\nbatch = " << c.pretrain.batch << "\n\n";
    const auto& tr = c.train;
    o << "[train]\nlr = " << real(tr.lr) << "\nkl_coef = " << real(tr.kl_coef)
      << "\nentropy_coef = " << real(tr.entropy_coef) << "\nalpha = " << real(tr.alpha)
      << "\nepsilon = " << real(tr.epsilon) << "\ndelta = " << real(tr.delta)
      << "\ngrad_clip = " << real(tr.grad_clip) << "\nwarmup_steps = " << tr.warmup_steps
      << "\ngroup_size = " << tr.group_size << "\nprompts_per_step = " << tr.prompts_per_step
      << "\nmicro_steps = " << tr.micro_steps << "\nk_max = " << c.k_max << "\n\n";
    o << "[workers]\ncount = " << c.workers << "\ngroups_per_file = " << c.groups_per_file
      << "\nadversarial = " << adv << "\nattack_from_step = " << c.attack_from_step
      << "\ncrash = " << crash << "\n\n";
    o << "[validators]\ncount = " << c.validators << "\nq = " << real(c.q) << "\n\n";
    o << "[relays]\ncount = " << c.relays << "\nshard_size = " << c.shard_size
      << "\nbandwidth = " << real(c.relay_bandwidth) << "\ncorrupt_prob = " << real(c.corrupt_prob)
      << "\nthrottled = " << c.throttled_relays << "\n\n";
    o << "[orchestrator]\nheartbeat_interval = " << real(c.heartbeat_interval)
      << "\nmax_missed = " << c.max_missed << "\n";
    return o.str();
}

crypto::KeyPair worker_key(const RunConfig& cfg, int index) {
    return crypto::KeyPair::from_seed(mix_seed(cfg.seed, 0x10000 + static_cast<std::uint64_t>(index)));
}

crypto::KeyPair validator_key(const RunConfig& cfg, int index) {
    return crypto::KeyPair::from_seed(mix_seed(cfg.seed, 0x20000 + static_cast<std::uint64_t>(index)));
}

crypto::KeyPair trainer_key(const RunConfig& cfg) {
    return crypto::KeyPair::from_seed(mix_seed(cfg.seed, 0x30000));
}

crypto::KeyPair owner_key(const RunConfig& cfg) {
    return crypto::KeyPair::from_seed(mix_seed(cfg.seed, 0x40000));
}

std::vector<int> canonical_worker_order(const RunConfig& cfg) {
    std::vector<std::pair<crypto::PublicKey, int>> keyed;
    for (int i = 0; i < cfg.workers; ++i) {
        keyed.emplace_back(worker_key(cfg, i).public_key(), i);
    }
    std::sort(keyed.begin(), keyed.end());
    std::vector<int> out;
    for (const auto& [_, i] : keyed) {
        out.push_back(i);
    }
    return out;
}

Prepared prepare(const RunConfig& cfg) {
    Prepared p;
    p.raw = tasks::generate_dataset(cfg.seed, static_cast<std::size_t>(cfg.n_tasks));
    p.base = tasks::pretrain_base_policy(tasks::toy_model_config(), cfg.pretrain);
    tasks::OfflineFilterOptions f = cfg.filter;
    f.rng_seed = cfg.seed + 10;
    p.dataset = tasks::offline_filter(p.raw, p.base, f);
    if (p.dataset.empty()) {
        throw InvalidInput("offline filter removed every task");
    }
    return p;
}

void save_prepared(const Prepared& p, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    tasks::write_dataset(dir / "dataset.jsonl", p.dataset);
    tasks::write_dataset(dir / "dataset_raw.jsonl", p.raw);
    const Bytes b = policy::serialize(p.base);
    std::ofstream out(dir / "base.ckpt", std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

Prepared load_prepared(const std::filesystem::path& dir) {
    Prepared p;
    p.dataset = tasks::read_dataset(dir / "dataset.jsonl");
    p.raw = tasks::read_dataset(dir / "dataset_raw.jsonl");
    std::ifstream in(dir / "base.ckpt", std::ios::binary);
    if (!in) {
        throw InvalidInput("missing base.ckpt in " + dir.string());
    }
    const std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    p.base = policy::deserialize(as_bytes(s));
    return p;
}

std::string svg_plot(const std::string& title, const std::vector<std::string>& names,
                     const std::vector<std::vector<double>>& series) {
    static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    const double w = 720, h = 400, ml = 60, mr = 150, mt = 40, mb = 50;
    std::size_t n = 0;
    double lo = 0.0, hi = 1.0;
    for (const auto& s : series) {
        n = std::max(n, s.size());
        for (double v : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    const auto x = [&](std::size_t i) {
        return ml + (n <= 1 ? 0.0 : (w - ml - mr) * static_cast<double>(i) / static_cast<double>(n - 1));
    };
    const auto y = [&](double v) { return mt + (h - mt - mb) * (hi - v) / (hi - lo); };
    std::ostringstream o;
    o.setf(std::ios::fixed);
    o.precision(2);
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << ml << "\" y=\"24\" font-size=\"15\">" << title << "</text>\n"
      << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
      << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        o << "<text x=\"" << ml - 8 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\">" << v
          << "</text>\n<line x1=\"" << ml << "\" y1=\"" << y(v) << "\" x2=\"" << w - mr << "\" y2=\""
          << y(v) << "\" stroke=\"#ddd\"/>\n";
    }
    o << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">step (0.."
      << (n == 0 ? 0 : n - 1) << ")</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kColors[s % std::size(kColors)];
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < series[s].size(); ++i) {
            o << x(i) << ',' << y(series[s][i]) << ' ';
        }
        o << "\"/>\n<text x=\"" << w - mr + 10 << "\" y=\"" << mt + 18 * static_cast<double>(s) + 10
          << "\" fill=\"" << color << "\">" << (s < names.size() ? names[s] : "") << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

}  // namespace swarm::harness
