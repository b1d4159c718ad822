// 2-D discrete Fourier transform over the spatial axes of a tensor, applied
// independently per (batch, channel) plane. Forward transform is unnormalized;
// the inverse carries the 1/(h*w) factor. Spatial dims must be powers of two
// (radix-2 Cooley-Tukey, rows then columns).
#pragma once

#include "freqdet/tensor.hpp"

namespace freqdet {

struct Spectrum {
  Tensor re;
  Tensor im;

  const Shape& shape() const { return re.shape(); }
};

Spectrum fft2(const Tensor& x);

// Inverse transform returning only the real part of the result.
Tensor ifft2(const Spectrum& s);
Spectrum ifft2_complex(const Spectrum& s);

// Multiplies both parts of the spectrum by a real factor. The factor is either
// a per-channel gain of shape (n,c,1,1) or a full per-bin mask (n,c,h,w).
Spectrum cmul(const Spectrum& s, const Tensor& m);
Spectrum cmul_spec(const Spectrum& a, const Spectrum& b);

// Elementwise complex magnitude; the backward rule clamps |z| below by 1e-12.
Tensor magnitude(const Spectrum& s);

bool is_power_of_two(std::int64_t v);

}  // namespace freqdet
