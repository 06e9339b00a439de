#pragma once

// Image mixing. mix_batch fills the masked-out region of each image from its
// partner under a pairing of batch indices (or with zeros / Gaussian noise
// for the erase-style baselines); switch_batch builds the complementary
// mixture. unmix_global / unmix_local are the whole-image blend and cut-paste
// mixtures used by the optional second mixing branch.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mixmask/image.hpp"
#include "mixmask/maskgen.hpp"

namespace mixmask {

enum class PairingKind { reverse, random, identity };
enum class FillMode { image, zero, gaussian };

PairingKind parse_pairing_kind(const std::string& name);
FillMode parse_fill_mode(const std::string& name);
const char* pairing_kind_name(PairingKind k);
const char* fill_mode_name(FillMode f);

struct Pairing {
  PairingKind kind = PairingKind::reverse;
  std::vector<int> perm;  // partner index per batch position

  std::size_t size() const { return perm.size(); }
};

// reverse: i -> n-1-i. random: uniform permutation, re-drawn until it differs
// from reverse when n > 2. identity: i -> i (for tests and ablations).
Pairing make_pairing(PairingKind kind, std::size_t n, std::uint64_t seed);

struct MixOutput {
  ImageBatch mixed;
  double lambda = 0.0;  // kept fraction, from the pixel mask
  Pairing pairing;
  FillMode fill = FillMode::image;
};

struct Box {
  int y1 = 0, x1 = 0, y2 = 0, x2 = 0;  // half-open [y1,y2) x [x1,x2)
};

struct UnmixOutput {
  ImageBatch mixed;
  double lambda = 0.0;  // weight of the primary image
  bool global = false;
  std::optional<Box> bbox;  // set for the local (cut-paste) variant
};

// Keeps pixels where mask.keep is 1 and fills the rest from the partner
// image (fill=image), with zeros, or with seeded i.i.d. standard normal
// noise. Mask dims must match the batch; pairing size must match N.
MixOutput mix_batch(const ImageBatch& batch, const PixelMask& mask,
                    const Pairing& pairing, FillMode fill,
                    std::uint64_t fill_seed = 0);

// The complementary mixture: partner pixels where the mask keeps, own pixels
// where it fills. Always operates on the original images.
ImageBatch switch_batch(const ImageBatch& batch, const PixelMask& mask,
                        const Pairing& pairing);

// Whole-image blend lam * x_i + (1 - lam) * x_{n-1-i} with lam ~ Beta(1, 1).
UnmixOutput unmix_global(const ImageBatch& batch, std::uint64_t seed);

// Cut-paste: a box scaled by sqrt(1 - lam) at a uniform center (clamped to
// the image) is replaced by the reverse partner's pixels; lambda is
// recomputed from the clamped box area.
UnmixOutput unmix_local(const ImageBatch& batch, double lam, std::uint64_t seed);

}  // namespace mixmask
