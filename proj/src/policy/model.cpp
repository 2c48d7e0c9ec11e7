// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "swarm/policy.hpp"
#include "swarm/rng.hpp"

namespace swarm::policy {

void ModelConfig::validate() const {
    if (vocab < 4) {
        throw InvalidInput("vocab must be >= 4");
    }
    if (window < 1 || max_len < window) {
        throw InvalidInput("need max_len >= window >= 1");
    }
    if (embed_dim < 1 || hidden_dim < 1) {
        throw InvalidInput("embed_dim and hidden_dim must be positive");
    }
    if (eos_id == pad_id) {
        throw InvalidInput("eos_id must differ from pad_id");
    }
    if (eos_id < 0 || eos_id >= vocab || pad_id < 0 || pad_id >= vocab) {
        throw InvalidInput("eos_id and pad_id must be valid token ids");
    }
}

PolicyParams PolicyParams::zeros(const ModelConfig& config) {
    config.validate();
    PolicyParams p;
    p.config = config;
    const auto v = static_cast<std::size_t>(config.vocab);
    const auto e = static_cast<std::size_t>(config.embed_dim);
    const auto h = static_cast<std::size_t>(config.hidden_dim);
    const auto in = static_cast<std::size_t>(config.input_dim());
    p.embed.assign(v * e, 0.0);
    p.hidden_w.assign(in * h, 0.0);
    p.hidden_b.assign(h, 0.0);
    p.out_w.assign(h * v, 0.0);
    p.out_b.assign(v, 0.0);
    return p;
}

PolicyParams PolicyParams::random(const ModelConfig& config, std::uint64_t seed, double scale) {
    PolicyParams p = zeros(config);
    SplitMix64 rng(seed);
    // Fan-in scaling keeps tanh units out of saturation at init.
    const double embed_scale = 1.0;
    const double hidden_scale = scale / std::sqrt(static_cast<double>(config.window));
    const double out_scale = scale;
    for (double& w : p.embed) {
        w = embed_scale * rng.normal();
    }
    for (double& w : p.hidden_w) {
        w = hidden_scale * rng.normal();
    }
    for (double& w : p.out_w) {
        w = out_scale * rng.normal();
    }
    return p;
}

std::size_t PolicyParams::size() const {
    return embed.size() + hidden_w.size() + hidden_b.size() + out_w.size() + out_b.size();
}

bool PolicyParams::all_finite() const {
    bool ok = true;
    for_each([&](double v) { ok = ok && std::isfinite(v); });
    return ok;
}

double PolicyParams::norm() const {
    double sq = 0.0;
    for_each([&](double v) { sq += v * v; });
    return std::sqrt(sq);
}

void PolicyParams::scale(double factor) {
    for_each([&](double& v) { v *= factor; });
}

void PolicyParams::add_scaled(const PolicyParams& other, double factor) {
    if (!(config == other.config)) {
        throw InvalidInput("add_scaled: mismatched model configs");
    }
    auto axpy = [factor](std::vector<double>& dst, const std::vector<double>& src) {
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] += factor * src[i];
        }
    };
    axpy(embed, other.embed);
    axpy(hidden_w, other.hidden_w);
    axpy(hidden_b, other.hidden_b);
    axpy(out_w, other.out_w);
    axpy(out_b, other.out_b);
}

Bytes serialize(const PolicyParams& params) {
    const ModelConfig& c = params.config;
    Bytes out;
    out.reserve(7 * 8 + params.size() * 8);
    for (int field : {c.vocab, c.window, c.embed_dim, c.hidden_dim, c.max_len, c.eos_id, c.pad_id}) {
        put_u64_le(out, static_cast<std::uint64_t>(field));
    }
    params.for_each([&](double v) { put_u64_le(out, std::bit_cast<std::uint64_t>(v)); });
    return out;
}

PolicyParams deserialize(ByteView bytes) {
    if (bytes.size() < 7 * 8) {
        throw InvalidInput("checkpoint too short for header");
    }
    int fields[7];
    for (int i = 0; i < 7; ++i) {
        const std::uint64_t v = get_u64_le(bytes, static_cast<std::size_t>(i) * 8);
        if (v > (1u << 20)) {
            throw InvalidInput("checkpoint header field out of range");
        }
        fields[i] = static_cast<int>(v);
    }
    ModelConfig c{fields[0], fields[1], fields[2], fields[3], fields[4], fields[5], fields[6]};
    PolicyParams p = PolicyParams::zeros(c);
    if (bytes.size() != 7 * 8 + p.size() * 8) {
        throw InvalidInput("checkpoint size does not match header");
    }
    std::size_t offset = 7 * 8;
    p.for_each([&](double& v) {
        v = std::bit_cast<double>(get_u64_le(bytes, offset));
        offset += 8;
    });
    if (!p.all_finite()) {
        throw InvalidInput("checkpoint contains non-finite weights");
    }
    return p;
}

std::vector<Token> context_window(const ModelConfig& config, std::span<const Token> tokens,
                                  std::size_t upto) {
    const auto w = static_cast<std::size_t>(config.window);
    std::vector<Token> ctx(w, config.pad_id);
    const std::size_t take = std::min(upto, w);
    for (std::size_t i = 0; i < take; ++i) {
        ctx[w - take + i] = tokens[upto - take + i];
    }
    return ctx;
}

ForwardTrace forward_trace(const PolicyParams& params, std::span<const Token> context) {
    const ModelConfig& c = params.config;
    if (context.size() != static_cast<std::size_t>(c.window)) {
        throw InvalidInput("context must hold exactly W tokens");
    }
    for (Token t : context) {
        if (t < 0 || t >= c.vocab) {
            throw InvalidInput("token id " + std::to_string(t) + " outside vocabulary");
        }
    }
    const auto e = static_cast<std::size_t>(c.embed_dim);
    const auto h = static_cast<std::size_t>(c.hidden_dim);
    const auto v = static_cast<std::size_t>(c.vocab);

    ForwardTrace tr;
    tr.context.assign(context.begin(), context.end());

    // Summation order is fixed: bias first, then inputs in ascending index.
    std::vector<double> pre(params.hidden_b);
    for (std::size_t slot = 0; slot < context.size(); ++slot) {
        const double* emb = &params.embed[static_cast<std::size_t>(context[slot]) * e];
        for (std::size_t k = 0; k < e; ++k) {
            const double x = emb[k];
            const double* row = &params.hidden_w[(slot * e + k) * h];
            for (std::size_t j = 0; j < h; ++j) {
                pre[j] += x * row[j];
            }
        }
    }
    tr.hidden.resize(h);
    for (std::size_t j = 0; j < h; ++j) {
        tr.hidden[j] = std::tanh(pre[j]);
    }

    std::vector<double> logits(params.out_b);
    for (std::size_t j = 0; j < h; ++j) {
        const double a = tr.hidden[j];
        const double* row = &params.out_w[j * v];
        for (std::size_t k = 0; k < v; ++k) {
            logits[k] += a * row[k];
        }
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t k = 0; k < v; ++k) {
        sum += std::exp(logits[k] - mx);
    }
    const double lse = mx + std::log(sum);
    tr.logprobs.resize(v);
    tr.probs.resize(v);
    for (std::size_t k = 0; k < v; ++k) {
        tr.logprobs[k] = logits[k] - lse;
        tr.probs[k] = std::exp(tr.logprobs[k]);
    }
    return tr;
}

TokenDist forward(const PolicyParams& params, std::span<const Token> context) {
    return {forward_trace(params, context).probs};
}

std::vector<ForwardTrace> prefill(const PolicyParams& params, std::span<const Token> prompt,
                                  std::span<const Token> output) {
    const ModelConfig& c = params.config;
    if (prompt.size() + output.size() > static_cast<std::size_t>(c.max_len)) {
        throw InvalidInput("prompt + output exceeds L_max");
    }
    std::vector<Token> seq(prompt.begin(), prompt.end());
    seq.insert(seq.end(), output.begin(), output.end());
    std::vector<ForwardTrace> traces;
    traces.reserve(output.size());
    for (std::size_t t = 0; t < output.size(); ++t) {
        if (output[t] < 0 || output[t] >= c.vocab) {
            throw InvalidInput("output token outside vocabulary");
        }
        const auto ctx = context_window(c, seq, prompt.size() + t);
        traces.push_back(forward_trace(params, ctx));
    }
    return traces;
}

double entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) {
            h -= p * std::log(p);
        }
    }
    return h;
}

SequenceScores sequence_logprobs(const PolicyParams& params, std::span<const Token> prompt,
                                 std::span<const Token> output) {
    auto traces = prefill(params, prompt, output);
    SequenceScores s;
    s.logprobs.reserve(output.size());
    for (std::size_t t = 0; t < traces.size(); ++t) {
        auto& tr = traces[t];
        s.logprobs.push_back(tr.logprobs[static_cast<std::size_t>(output[t])]);
        s.entropies.push_back(entropy(tr.probs));
        s.hidden.push_back(std::move(tr.hidden));
        s.probs.push_back(std::move(tr.probs));
    }
    return s;
}

void backprop(const PolicyParams& params, std::span<const ForwardTrace> traces,
              std::span<const std::vector<double>> dlogits, PolicyParams& grads) {
    const ModelConfig& c = params.config;
    if (traces.size() != dlogits.size()) {
        throw InvalidInput("backprop: trace/gradient count mismatch");
    }
    const auto e = static_cast<std::size_t>(c.embed_dim);
    const auto h = static_cast<std::size_t>(c.hidden_dim);
    const auto v = static_cast<std::size_t>(c.vocab);
    std::vector<double> dhidden(h);
    std::vector<double> dpre(h);

    for (std::size_t t = 0; t < traces.size(); ++t) {
        const ForwardTrace& tr = traces[t];
        const std::vector<double>& g = dlogits[t];
        bool any = false;
        for (double x : g) {
            any = any || x != 0.0;
        }
        if (!any) {
            continue;
        }
        for (std::size_t k = 0; k < v; ++k) {
            grads.out_b[k] += g[k];
        }
        for (std::size_t j = 0; j < h; ++j) {
            const double a = tr.hidden[j];
            const double* wrow = &params.out_w[j * v];
            double* grow = &grads.out_w[j * v];
            double acc = 0.0;
            for (std::size_t k = 0; k < v; ++k) {
                grow[k] += a * g[k];
                acc += wrow[k] * g[k];
            }
            dhidden[j] = acc;
            dpre[j] = acc * (1.0 - a * a);
            grads.hidden_b[j] += dpre[j];
        }
        for (std::size_t slot = 0; slot < tr.context.size(); ++slot) {
            const auto tok = static_cast<std::size_t>(tr.context[slot]);
            const double* emb = &params.embed[tok * e];
            double* gemb = &grads.embed[tok * e];
            for (std::size_t k = 0; k < e; ++k) {
                const std::size_t row_index = (slot * e + k) * h;
                const double* wrow = &params.hidden_w[row_index];
                double* grow = &grads.hidden_w[row_index];
                const double x = emb[k];
                double dx = 0.0;
                for (std::size_t j = 0; j < h; ++j) {
                    grow[j] += x * dpre[j];
                    dx += wrow[j] * dpre[j];
                }
                gemb[k] += dx;
            }
        }
    }
}

}  // namespace swarm::policy
