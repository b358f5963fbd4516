#include "dhn/denoise.hpp"

#include <string>

namespace dhn {

void NoiseSchedule::validate() const {
  if (levels.size() < 2 || levels.front() != 0.0 || levels.back() != 1.0) {
    throw ConfigError("noise schedule must run from 0 to 1");
  }
  for (size_t i = 1; i < levels.size(); ++i) {
    if (!(levels[i] > levels[i - 1])) {
      throw ConfigError("noise schedule must be strictly increasing");
    }
  }
}

NoiseSchedule make_schedule(int n) {
  if (n < 1) throw ConfigError("schedule needs at least one step");
  NoiseSchedule sched;
  sched.levels.resize(static_cast<size_t>(n) + 1);
  for (int i = 0; i <= n; ++i) {
    sched.levels[static_cast<size_t>(i)] = double(i) / n;
  }
  sched.validate();
  return sched;
}

const char* mask_kind_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::kAutoregressive: return "autoregressive";
    case MaskKind::kSuperres: return "superres";
    case MaskKind::kRandom: return "random";
  }
  return "?";
}

MaskKind mask_kind_from_name(std::string_view name) {
  if (name == "autoregressive") return MaskKind::kAutoregressive;
  if (name == "superres") return MaskKind::kSuperres;
  if (name == "random") return MaskKind::kRandom;
  throw ConfigError("unknown mask kind: " + std::string(name));
}

std::vector<int> make_mask(MaskKind kind, int b, int s, Rng& rng) {
  if (b < 1 || s < 1 || s > b) throw ConfigError("bad block geometry for mask");
  const int span = b + s;
  std::vector<int> m(static_cast<size_t>(span), 1);
  switch (kind) {
    case MaskKind::kAutoregressive:
      for (int i = b; i < span; ++i) m[static_cast<size_t>(i)] = 0;
      break;
    case MaskKind::kSuperres:
      for (int i = b / 2; i < b / 2 + s; ++i) m[static_cast<size_t>(i)] = 0;
      break;
    case MaskKind::kRandom:
      for (int i = 0; i < span; ++i) {
        m[static_cast<size_t>(i)] = rng.uniform() < 0.5 ? 0 : 1;
      }
      break;
  }
  return m;
}

CorruptionDraw sample_training_corruption(Rng& rng, MaskKind kind, int b,
                                          int s, int channels,
                                          const NoiseSchedule& sched) {
  sched.validate();
  if (channels < 1) throw ConfigError("need at least one state channel");
  const int span = b + s;
  CorruptionDraw draw;
  draw.mask = make_mask(kind, b, s, rng);
  draw.scale_idx.resize(static_cast<size_t>(span));
  const int n_levels = static_cast<int>(sched.levels.size());
  for (int i = 0; i < span; ++i) {
    draw.scale_idx[static_cast<size_t>(i)] = static_cast<int>(
        rng.uniform_index(static_cast<std::uint64_t>(n_levels)));
  }
  draw.eps.resize(span, channels);
  for (double& v : draw.eps.a) v = rng.normal();
  return draw;
}

std::vector<double> effective_scales(const NoiseSchedule& sched,
                                     const CorruptionDraw& draw) {
  std::vector<double> out(draw.mask.size());
  for (size_t i = 0; i < draw.mask.size(); ++i) {
    out[i] = sched.levels[static_cast<size_t>(draw.scale_idx[i])] *
             (1 - draw.mask[i]);
  }
  return out;
}

Mat corrupt(const Mat& values, const std::vector<int>& mask,
            const std::vector<double>& scales, const Mat& eps) {
  if (static_cast<int>(mask.size()) != values.rows ||
      scales.size() != mask.size() || !values.same_shape(eps)) {
    throw ConfigError("corruption arguments disagree on the span");
  }
  Mat out(values.rows, values.cols);
  for (int i = 0; i < values.rows; ++i) {
    const double a_eff = scales[static_cast<size_t>(i)] *
                         (1 - mask[static_cast<size_t>(i)]);
    for (int c = 0; c < values.cols; ++c) {
      out(i, c) = (1.0 - a_eff) * values(i, c) + a_eff * eps(i, c);
    }
  }
  return out;
}

std::vector<double> token_scales(const std::vector<double>& span_scales, int b,
                                 int q_start, int p_start) {
  std::vector<double> out(static_cast<size_t>(2 * b));
  for (int i = 0; i < b; ++i) {
    out[static_cast<size_t>(i)] = span_scales[static_cast<size_t>(q_start + i)];
    out[static_cast<size_t>(b + i)] =
        span_scales[static_cast<size_t>(p_start + i)];
  }
  return out;
}

Mat denoise_infer(const BlockHamiltonian& ham, int stride,
                  const Mat& known_states, const std::vector<int>& mask,
                  const Mat& z, const NoiseSchedule& sched, Rng& rng) {
  sched.validate();
  const int b = ham.block_size();
  const int s = stride;
  const int dim = ham.state_dim();
  const int span = b + s;
  if (s < 1 || s > b) throw ConfigError("stride must satisfy 1 <= s <= b");
  if (known_states.rows != span || known_states.cols != 2 * dim) {
    throw ConfigError("span must hold " + std::to_string(span) + " states of " +
                      std::to_string(2 * dim) + " channels");
  }
  if (static_cast<int>(mask.size()) != span) {
    throw ConfigError("mask length must match the span");
  }
  int known = 0;
  for (int m : mask) known += m != 0 ? 1 : 0;
  if (known == span) return known_states;
  if (known == 0) throw ConfigError("span needs at least one known state");

  Mat x = known_states;
  for (int i = 0; i < span; ++i) {
    if (mask[static_cast<size_t>(i)] != 0) continue;
    for (int c = 0; c < 2 * dim; ++c) x(i, c) = rng.normal();
  }

  const int n_steps = sched.steps();
  std::vector<double> span_scales(static_cast<size_t>(span));
  Mat clean(span, 2 * dim);
  for (int n = n_steps; n >= 1; --n) {
    const double alpha = sched.levels[static_cast<size_t>(n)];
    for (int i = 0; i < span; ++i) {
      span_scales[static_cast<size_t>(i)] =
          mask[static_cast<size_t>(i)] != 0 ? 0.0 : alpha;
    }

    const Mat q_lo = slice(x, 0, b, 0, dim);
    const Mat q_hi = slice(x, s, b, 0, dim);
    const Mat p_lo = slice(x, 0, b, dim, dim);
    const Mat p_hi = slice(x, s, b, dim, dim);
    const BlockPrediction plus = h_plus_apply(
        ham, q_lo, p_hi, z, token_scales(span_scales, b, 0, s));
    const BlockPrediction minus = h_minus_apply(
        ham, q_hi, p_lo, z, token_scales(span_scales, b, s, 0));

    // plus predicts q over [s, span) and p over [0, b);
    // minus predicts q over [0, b) and p over [s, span)
    for (int pos = 0; pos < span; ++pos) {
      for (int c = 0; c < dim; ++c) {
        double q;
        if (pos < s) {
          q = minus.q(pos, c);
        } else if (pos >= b) {
          q = plus.q(pos - s, c);
        } else {
          q = 0.5 * (minus.q(pos, c) + plus.q(pos - s, c));
        }
        double p;
        if (pos < s) {
          p = plus.p(pos, c);
        } else if (pos >= b) {
          p = minus.p(pos - s, c);
        } else {
          p = 0.5 * (plus.p(pos, c) + minus.p(pos - s, c));
        }
        clean(pos, c) = q;
        clean(pos, dim + c) = p;
      }
    }

    const double next = sched.levels[static_cast<size_t>(n) - 1];
    for (int i = 0; i < span; ++i) {
      if (mask[static_cast<size_t>(i)] != 0) continue;
      for (int c = 0; c < 2 * dim; ++c) {
        const double eps = next > 0.0 ? rng.normal() : 0.0;
        x(i, c) = (1.0 - next) * clean(i, c) + next * eps;
      }
    }
    if (!x.all_finite()) {
      throw NumericError("non-finite state at denoising step " +
                         std::to_string(n));
    }
  }
  return x;
}

}  // namespace dhn
