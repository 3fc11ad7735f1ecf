#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

// Bit-accurate model of one NB-SMT shared MAC unit.
//
// Up to T threads (activation/weight quanta pairs) present themselves each
// cycle. A thread is active when its product is nonzero. With at most one
// active thread the MAC computes exactly. On a collision the active threads
// are squeezed by dropping 4 bits of precision:
//   2 active threads : each thread reduces ONE operand, the one whose
//                      reduction perturbs the product least (ties reduce the
//                      activation);
//   3-4 active       : each thread reduces BOTH operands.
// A reduced operand x becomes q * 16 with q = round(x / 16) clamped to
// [0, 15] (unsigned activations, ties up) or [-8, 7] (signed weights, ties
// away from zero).

namespace nbsmt::squeeze {

inline constexpr int kReduceBits = 4;
inline constexpr int kMaxThreads = 4;

enum class Signedness { kUnsigned, kSigned };

struct ThreadOperands {
  std::uint8_t a = 0;  // activation quantum, [0, 255]
  std::int8_t w = 0;   // weight quantum, [-127, 127]
};

enum class Reduction : std::uint8_t { kNone, kActivation, kWeight, kBoth };

/// Operand bit budget applied per active-thread count.
enum class ReductionLevel { kExact, kOneOperand, kBothOperands };

struct SqueezePolicy {
  int threads = 1;  // capacity T in {1, 2, 4}

  explicit SqueezePolicy(int t);
  ReductionLevel level_for(int active) const;
};

bool is_active(ThreadOperands op);

/// Indices of threads with a nonzero product, ascending.
std::vector<int> active_threads(std::span<const ThreadOperands> ops);

/// Reduced representative q * 2^k of `x`. Only k = 4 is supported.
int reduce_operand(int x, int bits, Signedness signedness);
int reduce_activation(int a);
int reduce_weight(int w);

struct ThreadRecord {
  bool active = false;
  Reduction reduction = Reduction::kNone;
  std::int32_t exact = 0;     // a * w
  std::int32_t squeezed = 0;  // product actually accumulated
  std::int32_t error() const { return squeezed - exact; }
};

struct MacCycleResult {
  std::int32_t contribution = 0;
  int active_count = 0;
  std::array<ThreadRecord, kMaxThreads> threads{};

  bool collided() const { return active_count >= 2; }
  std::int64_t abs_error() const;
};

/// One shared-MAC cycle. `ops.size()` must not exceed the policy capacity;
/// missing threads are treated as inactive. Throws Error(kInvalidArgument)
/// on out-of-range operands (w = -128).
MacCycleResult mac_cycle(std::span<const ThreadOperands> ops, const SqueezePolicy& policy);

/// The product an active thread contributes when exactly two threads
/// collide.
std::int32_t one_operand_product(int a, int w, Reduction* chosen = nullptr);
std::int32_t both_operand_product(int a, int w);

}  // namespace nbsmt::squeeze
