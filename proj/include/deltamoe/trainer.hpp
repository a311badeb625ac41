// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// AdamW optimisation loop for the dense and MoE training stages.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "deltamoe/data.hpp"
#include "deltamoe/model.hpp"
#include "deltamoe/moe.hpp"

namespace deltamoe {

struct TrainPlan {
    Stage stage = Stage::pretrain;
    std::size_t steps = 0;  // 0: derive from epochs
    double epochs = 1.0;
    double peak_lr = 1e-3;
    double warmup_frac = 0.03;
    double floor_frac = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.01;
    double adam_eps = 1e-8;
    std::size_t batch_size = 32;
    std::size_t seq_len = 128;
    double alpha = 0.01;
    std::uint64_t seed = 0;
    ReplayRatio replay{1, 2};

    std::size_t resolve_steps(const BatchStream& data) const {
        if (steps > 0) return steps;
        const auto s = static_cast<std::size_t>(std::ceil(epochs * static_cast<double>(data.batches_per_epoch())));
        return s > 0 ? s : 1;
    }
};

// Linear warmup to peak, then cosine decay reaching floor at the final step.
class CosineSchedule {
public:
    CosineSchedule(double peak, std::size_t total_steps, double warmup_frac, double floor_frac)
        : peak_(peak), floor_(peak * floor_frac), total_(total_steps) {
        warmup_ = static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
        if (total_ > 0 && warmup_ >= total_) warmup_ = total_ - 1;
    }

    double operator()(std::size_t step) const {
        if (step < warmup_) return peak_ * static_cast<double>(step + 1) / static_cast<double>(warmup_ + 1);
        const std::size_t last = total_ - 1;
        if (last <= warmup_) return step >= last && total_ > 1 ? floor_ : peak_;
        const double progress = static_cast<double>(std::min(step, last) - warmup_) / static_cast<double>(last - warmup_);
        return floor_ + (peak_ - floor_) * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
    }

    std::size_t warmup_steps() const noexcept { return warmup_; }

private:
    double peak_, floor_;
    std::size_t total_, warmup_ = 0;
};

// Decoupled weight decay Adam. Moments exist only for the trainable names.
template <typename T>
class AdamW {
public:
    AdamW(const TrainPlan& plan, const ParamStore<T>& params, const TrainableSet& trainable)
        : plan_(plan) {
        for (const auto& n : params.names()) {
            if (!trainable.count(n)) continue;
            const auto& shape = params.at(n).shape();
            state_.emplace(n, Moments{Tensor<T>::zeros(shape), Tensor<T>::zeros(shape)});
        }
    }

    void step(ParamStore<T>& params, const std::string& name, const Tensor<T>& grad, double lr) {
        auto& st = state_.at(name);
        ++st.t;
        auto& p = params.at(name);
        const double b1 = plan_.beta1, b2 = plan_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double g = grad[i];
            const double m = b1 * st.m[i] + (1.0 - b1) * g;
            const double v = b2 * st.v[i] + (1.0 - b2) * g * g;
            st.m[i] = static_cast<T>(m);
            st.v[i] = static_cast<T>(v);
            const double update = (m / c1) / (std::sqrt(v / c2) + plan_.adam_eps) + plan_.weight_decay * p[i];
            p[i] = static_cast<T>(p[i] - lr * update);
        }
    }

    bool has_state(const std::string& name) const { return state_.count(name) != 0; }
    std::size_t num_states() const { return state_.size(); }

private:
    struct Moments {
        Tensor<T> m, v;
        std::size_t t = 0;
    };
    TrainPlan plan_;
    std::map<std::string, Moments> state_;
};

struct TrainRecord {
    std::size_t step = 0;
    double lr = 0;
    double ntp = 0;
    double lb = 0;
    double total = 0;
};

struct TrainLog {
    std::vector<TrainRecord> records;

    // One JSON object per line.
    void write_jsonl(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write train log: " + path);
        for (const auto& r : records) {
            nlohmann::ordered_json j;
            j["step"] = r.step;
            j["lr"] = r.lr;
            j["L_NTP"] = r.ntp;
            j["L_LB"] = r.lb;
            j["L"] = r.total;
            out << j.dump() << '\n';
        }
    }
};

template <typename T>
struct StageResult {
    Model<T> model;
    TrainLog log;
};

struct RunStageOptions {
    std::string last_good_checkpoint;  // reported if the loss goes non-finite
    std::function<void(const TrainRecord&)> on_step;
};

template <typename T>
StageResult<T> run_stage(const Model<T>& input, const TrainPlan& plan, BatchStream& data,
                         const RunStageOptions& opts = {}) {
    const bool moe_stage = plan.stage == Stage::cpt ? input.is_moe() : plan.stage == Stage::router_tune;
    if (plan.stage == Stage::router_tune && !input.is_moe()) {
        throw ArgumentError("router_tune stage requires an MoE model");
    }
    if ((plan.stage == Stage::pretrain || plan.stage == Stage::posttrain) && input.is_moe()) {
        throw ArgumentError(std::string(stage_name(plan.stage)) + " stage requires a dense model");
    }
    if (!(plan.peak_lr >= 0.0)) throw ArgumentError("peak learning rate must be >= 0");
    StageResult<T> out{input, {}};
    Model<T>& model = out.model;
    const TrainableSet trainable = trainable_set(model, plan.stage);
    AdamW<T> opt(plan, model.params, trainable);
    const std::size_t total = plan.resolve_steps(data);
    CosineSchedule lr(plan.peak_lr, total, plan.warmup_frac, plan.floor_frac);
    const double alpha = moe_stage ? plan.alpha : 0.0;

    for (std::size_t step = 0; step < total; ++step) {
        Batch batch = data.next();
        Tape<T> tape;
        Bound b;
        LossTerms<T> loss;
        try {
            b = bind_params(tape, model.params, &trainable);
            loss = total_loss(tape, model, b, batch, alpha);
        } catch (const NumericError& e) {
            throw TrainingAborted(step, opts.last_good_checkpoint, e.what());
        }
        if (!std::isfinite(static_cast<double>(loss.total_value))) {
            throw TrainingAborted(step, opts.last_good_checkpoint, "non-finite loss");
        }
        tape.backward(loss.total);
        const double rate = lr(step);
        for (const auto& name : model.params.names()) {
            if (!trainable.count(name)) continue;
            const auto& g = tape.grad_ref(b(name));
            opt.step(model.params, name, g.empty() ? Tensor<T>::zeros(model.params.at(name).shape()) : g, rate);
        }
        TrainRecord rec{step, rate, static_cast<double>(loss.ntp_value), static_cast<double>(loss.lb_value),
                        static_cast<double>(loss.total_value)};
        out.log.records.push_back(rec);
        if (opts.on_step) opts.on_step(rec);
    }
    return out;
}

}  // namespace deltamoe
