// Baseline semi-supervised objectives: hard pseudo-labels, virtual
// adversarial training and conditional entropy minimization.
#pragma once

#include "maple/autodiff.hpp"
#include "maple/backbone.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace maple::semisup {

using backbone::ClassDistribution;

struct VatConfig {
  double epsilon = 1.0;  // L2 radius of the perturbation, per item
  double xi = 10.0;      // probe scale of the power iteration
  int power_iterations = 1;

  /// epsilon == 0 is accepted and yields a zero perturbation.
  void validate() const;
};

struct UnsupLossWeights {
  double vat = 0.0;
  double entmin = 0.0;
  double maple = 0.0;
  double pseudo = 0.0;  // cross-entropy against hard pseudo-labels

  void validate() const;
  bool all_zero() const { return vat == 0.0 && entmin == 0.0 && maple == 0.0 && pseudo == 0.0; }
};

// ---- pseudo labels -------------------------------------------------------------

struct HardPseudoLabel {
  std::string video_id;
  int label = 0;
  double confidence = 0.0;
};

/// Argmax (lowest index on ties) of every distribution. Items below
/// `min_confidence` are dropped.
std::vector<HardPseudoLabel> hard_pseudo_labels(std::span<const std::string> video_ids,
                                                std::span<const ClassDistribution> distributions,
                                                std::optional<double> min_confidence = std::nullopt);

/// CSV with header video_id,class,confidence,checkpoint_hash.
void write_pseudo_labels(const std::filesystem::path& path, std::span<const HardPseudoLabel> labels,
                         const std::string& checkpoint_hash);
std::vector<HardPseudoLabel> read_pseudo_labels(const std::filesystem::path& path);

// ---- VAT -----------------------------------------------------------------------

/// Maps stacked coordinates (batch * rows_per_item x 3) to logits (batch x K)
/// on the given tape.
using LogitsFn = std::function<ad::Var(ad::Tape&, ad::Var coords)>;

/// Power-iteration estimate of the adversarial direction of each item,
/// scaled to L2 norm epsilon per item. `clean_probs` (batch x K) is the
/// detached prediction on the unperturbed input. An item whose gradient
/// vanishes keeps its random start direction.
Matrix vat_perturbation(const Matrix& coords, int batch, const Matrix& clean_probs, const LogitsFn& logits_fn,
                        const VatConfig& cfg, std::uint64_t seed);

/// Mean over items of KL(clean || perturbed); the clean side is a constant.
ad::Var vat_loss(const Matrix& clean_probs, ad::Var perturbed_logits);
double vat_loss(std::span<const ClassDistribution> clean, std::span<const ClassDistribution> perturbed);

// ---- EntMin --------------------------------------------------------------------

/// Mean Shannon entropy, entries clamped at 1e-8 inside the log.
double entmin_loss(std::span<const ClassDistribution> distributions);
double entropy(const Vector& p);

// ---- combination -----------------------------------------------------------

struct UnsupTermValues {
  std::optional<double> vat, entmin, maple, pseudo;
};

/// Exact weighted sum; a zero-weight term contributes nothing, even if unset.
double combined_unsup_loss(const UnsupTermValues& terms, const UnsupLossWeights& weights);

/// Lazily evaluated terms: only callbacks with a nonzero weight run.
struct UnsupTermFns {
  std::function<ad::Var()> vat, entmin, maple, pseudo;
};

/// Returns the weighted sum on the tape (nullopt when every weight is zero)
/// and records each evaluated term's value in `evaluated`.
std::optional<ad::Var> combined_unsup_loss(const UnsupTermFns& terms, const UnsupLossWeights& weights,
                                           UnsupTermValues* evaluated = nullptr);

}  // namespace maple::semisup
