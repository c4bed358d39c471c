#pragma once

// Common-subspace alignment of hidden states across two domains.
//
// Each domain is centered and row-normalized, then reduced to its top-d′
// principal subspace K. The source frame is rotated onto the target frame by
// a d′×d′ matrix M, giving K_S^align = K_S·M, so a detector trained on target
// projections can score source projections.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tp/linalg.hpp"
#include "tp/states.hpp"

namespace tp {

struct DomainStats {
  std::vector<double> mean;
  linalg::Matrix basis;  // d×d′
  std::vector<double> variances;
  std::size_t d_prime = 0;

  bool operator==(const DomainStats&) const = default;
};

struct CenteredRows {
  linalg::Matrix rows;  // unit-norm rows (h − μ)/‖h − μ‖
  std::vector<double> mean;
  std::vector<std::size_t> kept;  // input index of each row
  std::size_t dropped = 0;
};

/// Throws ContractViolation for fewer than two vectors or ragged input, and
/// DegenerateDataError when every vector coincides with the mean.
CenteredRows center_normalize(const std::vector<std::vector<double>>& states, Diagnostics* diagnostics = nullptr);

/// (h − μ)/‖h − μ‖, or nullopt when h equals μ.
std::optional<std::vector<double>> normalize_state(std::span<const double> h, std::span<const double> mean);

/// Top-d′ principal subspace of already-normalized rows. The mean is left
/// empty; fit_comnhallu fills it in.
DomainStats build_subspace(const linalg::Matrix& normalized, std::size_t d_prime);

struct Alignment {
  linalg::Matrix m;          // d′×d′
  linalg::Matrix k_s_align;  // d_s×d′
};

/// M = K_Sᵀ·K_T. Both bases must live in the same ambient space.
Alignment align_subspaces(const linalg::Matrix& k_s, const linalg::Matrix& k_t);

/// M = argmin ‖P_S·M − P_T‖ over paired anchor projections (rows of P_S and
/// P_T are the same underlying inputs seen by each domain).
Alignment align_subspaces_anchored(const linalg::Matrix& k_s, const linalg::Matrix& k_t, const linalg::Matrix& p_s,
                                   const linalg::Matrix& p_t);

/// Paired raw states: source[i] and target[i] describe the same input.
struct AnchorPairs {
  std::vector<std::vector<double>> source;
  std::vector<std::vector<double>> target;
};

struct AlignmentBundle {
  DomainStats source;  // basis is K_S^align
  DomainStats target;
  linalg::Matrix m;
  std::size_t d_prime = 0;
  std::string config_hash;

  bool operator==(const AlignmentBundle&) const = default;
};

enum class Domain { kSource, kTarget };

/// center_normalize and build_subspace per domain, then alignment. With
/// anchors M comes from the anchor regression; without them the domains
/// must share a dimension and M = K_SᵀK_T.
AlignmentBundle fit_comnhallu(const std::vector<std::vector<double>>& source_states,
                              const std::vector<std::vector<double>>& target_states, std::size_t d_prime,
                              const AnchorPairs* anchors = nullptr, Diagnostics* diagnostics = nullptr);

/// normalized(h − μ)ᵀ·K for the domain. A state equal to the domain mean
/// projects to zero and is noted in `diagnostics`.
std::vector<double> project_state(std::span<const double> h, Domain domain, const AlignmentBundle& bundle,
                                  Diagnostics* diagnostics = nullptr);
linalg::Matrix project_states(const std::vector<std::vector<double>>& states, Domain domain,
                              const AlignmentBundle& bundle, Diagnostics* diagnostics = nullptr);

/// Labeled states with their vectors replaced by projections.
std::vector<LabeledState> project_labeled(const std::vector<LabeledState>& states, Domain domain,
                                          const AlignmentBundle& bundle);

void save_bundle(const std::filesystem::path& path, const AlignmentBundle& bundle);
AlignmentBundle load_bundle(const std::filesystem::path& path);

}  // namespace tp
