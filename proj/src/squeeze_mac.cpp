#include "nbsmt/squeeze_mac.hpp"

#include <algorithm>
#include <cstdlib>

#include "nbsmt/error.hpp"

namespace nbsmt::squeeze {

namespace {

constexpr int kHalfStep = 1 << (kReduceBits - 1);
constexpr int kUnsignedMaxQ = (1 << kReduceBits) - 1;  // 15
constexpr int kSignedMinQ = -(1 << (kReduceBits - 1));  // -8
constexpr int kSignedMaxQ = (1 << (kReduceBits - 1)) - 1;  // 7

void check_operands(ThreadOperands op) {
  if (op.w < -127) throw Error(ErrorKind::kInvalidArgument, "weight quantum -128 is outside [-127, 127]");
}

}  // namespace

SqueezePolicy::SqueezePolicy(int t) : threads(t) {
  if (t != 1 && t != 2 && t != 4) {
    throw Error(ErrorKind::kInvalidArgument, "thread capacity must be 1, 2 or 4 (got " + std::to_string(t) + ")");
  }
}

ReductionLevel SqueezePolicy::level_for(int active) const {
  if (threads == 1 || active <= 1) return ReductionLevel::kExact;
  if (active == 2) return ReductionLevel::kOneOperand;
  return ReductionLevel::kBothOperands;
}

bool is_active(ThreadOperands op) { return op.a != 0 && op.w != 0; }

std::vector<int> active_threads(std::span<const ThreadOperands> ops) {
  std::vector<int> out;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    if (is_active(ops[i])) out.push_back(static_cast<int>(i));
  }
  return out;
}

int reduce_activation(int a) {
  return std::min((a + kHalfStep) >> kReduceBits, kUnsignedMaxQ) << kReduceBits;
}

int reduce_weight(int w) {
  const int mag = (std::abs(w) + kHalfStep) >> kReduceBits;
  const int q = std::clamp(w < 0 ? -mag : mag, kSignedMinQ, kSignedMaxQ);
  return q * (1 << kReduceBits);
}

int reduce_operand(int x, int bits, Signedness signedness) {
  if (bits != kReduceBits) {
    throw Error(ErrorKind::kInvalidArgument, "only " + std::to_string(kReduceBits) + "-bit reduction is modeled");
  }
  if (signedness == Signedness::kUnsigned) {
    if (x < 0 || x > 255) throw Error(ErrorKind::kInvalidArgument, "unsigned operand outside [0, 255]");
    return reduce_activation(x);
  }
  if (x < -127 || x > 127) throw Error(ErrorKind::kInvalidArgument, "signed operand outside [-127, 127]");
  return reduce_weight(x);
}

std::int32_t one_operand_product(int a, int w, Reduction* chosen) {
  const int ra = reduce_activation(a);
  const int rw = reduce_weight(w);
  const int err_a = std::abs(a - ra) * std::abs(w);
  const int err_w = a * std::abs(w - rw);
  const bool reduce_a = err_a <= err_w;
  if (chosen) *chosen = reduce_a ? Reduction::kActivation : Reduction::kWeight;
  return reduce_a ? ra * w : a * rw;
}

std::int32_t both_operand_product(int a, int w) { return reduce_activation(a) * reduce_weight(w); }

std::int64_t MacCycleResult::abs_error() const {
  std::int64_t e = 0;
  for (const auto& t : threads) e += std::abs(static_cast<std::int64_t>(t.error()));
  return e;
}

MacCycleResult mac_cycle(std::span<const ThreadOperands> ops, const SqueezePolicy& policy) {
  if (static_cast<int>(ops.size()) > policy.threads) {
    throw Error(ErrorKind::kInvalidArgument, "more operands than thread capacity");
  }
  MacCycleResult r;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    check_operands(ops[i]);
    if (is_active(ops[i])) ++r.active_count;
  }
  const auto level = policy.level_for(r.active_count);
  for (std::size_t i = 0; i < ops.size(); ++i) {
    auto& t = r.threads[i];
    if (!is_active(ops[i])) continue;
    const int a = ops[i].a;
    const int w = ops[i].w;
    t.active = true;
    t.exact = a * w;
    switch (level) {
      case ReductionLevel::kExact:
        t.squeezed = t.exact;
        break;
      case ReductionLevel::kOneOperand:
        t.squeezed = one_operand_product(a, w, &t.reduction);
        break;
      case ReductionLevel::kBothOperands:
        t.reduction = Reduction::kBoth;
        t.squeezed = both_operand_product(a, w);
        break;
    }
    r.contribution += t.squeezed;
  }
  return r;
}

}  // namespace nbsmt::squeeze
