//! Pure workload kernels, shared by software and hardware mappings.

use thiserror::Error;

pub const SOBEL_WIDTH: u32 = 640;
pub const SOBEL_HEIGHT: u32 = 480;
pub const SOBEL_CHANNELS: u32 = 3;
pub const SORT_LEN: usize = 2048;

/// ±45° in Q8.6.
pub const MAX_ANGLE_Q6: i32 = 45 * 64;
pub const CORDIC_ITERATIONS: usize = 16;
pub const PWM_NEUTRAL: u32 = 512;
pub const PWM_MAX: u32 = 1023;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("image is {width}x{height}x{channels} with {len} bytes, expected {ew}x{eh}x{ec}")]
    Dimensions { width: u32, height: u32, channels: u32, len: usize, ew: u32, eh: u32, ec: u32 },
    #[error("expected {expected} elements, got {got}")]
    Length { expected: usize, got: usize },
    #[error("angle {0} (Q8.6) outside ±45°")]
    AngleRange(i32),
}

/// Sobel magnitude `min(|Gx| + |Gy|, 255)` per channel of an interleaved
/// image; border pixels are 0.
pub fn sobel(width: u32, height: u32, channels: u32, data: &[u8]) -> Vec<u8> {
    let (w, h, c) = (width as usize, height as usize, channels as usize);
    assert_eq!(data.len(), w * h * c);
    let mut out = vec![0u8; data.len()];
    if w < 3 || h < 3 {
        return out;
    }
    let stride = w * c;
    for y in 1..h - 1 {
        let up = &data[(y - 1) * stride..y * stride];
        let mid = &data[y * stride..(y + 1) * stride];
        let down = &data[(y + 1) * stride..(y + 2) * stride];
        let row = &mut out[y * stride..(y + 1) * stride];
        for (i, px) in row.iter_mut().enumerate().take(stride - c).skip(c) {
            let p = |r: &[u8], o: usize| r[o] as i32;
            let (l, r) = (i - c, i + c);
            let gx = (p(up, r) + 2 * p(mid, r) + p(down, r)) - (p(up, l) + 2 * p(mid, l) + p(down, l));
            let gy = (p(down, l) + 2 * p(down, i) + p(down, r)) - (p(up, l) + 2 * p(up, i) + p(up, r));
            *px = (gx.abs() + gy.abs()).min(255) as u8;
        }
    }
    out
}

/// [`sobel`] restricted to the 640×480 RGB workload.
pub fn workload_sobel(width: u32, height: u32, channels: u32, data: &[u8]) -> Result<Vec<u8>, WorkloadError> {
    let expected = (SOBEL_WIDTH * SOBEL_HEIGHT * SOBEL_CHANNELS) as usize;
    if (width, height, channels) != (SOBEL_WIDTH, SOBEL_HEIGHT, SOBEL_CHANNELS) || data.len() != expected {
        return Err(WorkloadError::Dimensions {
            width,
            height,
            channels,
            len: data.len(),
            ew: SOBEL_WIDTH,
            eh: SOBEL_HEIGHT,
            ec: SOBEL_CHANNELS,
        });
    }
    Ok(sobel(width, height, channels, data))
}

/// Odd-even transposition sort: `n` stages alternating between even and odd
/// compare-exchange pairs.
pub fn odd_even_transposition_sort(data: &mut [u32]) {
    let n = data.len();
    for stage in 0..n {
        let mut i = stage % 2;
        while i + 1 < n {
            if data[i] > data[i + 1] {
                data.swap(i, i + 1);
            }
            i += 2;
        }
    }
}

pub fn workload_sort(data: &[u32]) -> Result<Vec<u32>, WorkloadError> {
    if data.len() != SORT_LEN {
        return Err(WorkloadError::Length { expected: SORT_LEN, got: data.len() });
    }
    let mut v = data.to_vec();
    odd_even_transposition_sort(&mut v);
    Ok(v)
}

/// atan(2^-i) in degrees, scaled by 2^16.
const ATAN_TABLE_Q16: [i64; CORDIC_ITERATIONS] =
    [2949120, 1740967, 919879, 466945, 234379, 117304, 58666, 29335, 14668, 7334, 3667, 1833, 917, 458, 229, 115];

/// atan(num/den) in degrees scaled by 2^16, by CORDIC vectoring. `den` must
/// be positive.
pub fn cordic_atan_deg_q16(num: i64, den: i64) -> i64 {
    assert!(den > 0, "denominator must be positive");
    // headroom for the shifts while staying well inside i64
    let scale = 62 - 2 - (64 - num.unsigned_abs().max(den as u64).leading_zeros()) as i64;
    let shift = scale.clamp(0, 40) as u32;
    let (mut x, mut y) = (den << shift, num << shift);
    let mut z = 0i64;
    for (i, &a) in ATAN_TABLE_Q16.iter().enumerate() {
        let (xs, ys) = (x >> i, y >> i);
        if y > 0 {
            x += ys;
            y -= xs;
            z += a;
        } else {
            x -= ys;
            y += xs;
            z -= a;
        }
    }
    z
}

fn round_shift(v: i64, bits: u32) -> i64 {
    let half = 1i64 << (bits - 1);
    if v >= 0 {
        (v + half) >> bits
    } else {
        -((-v + half) >> bits)
    }
}

/// atan(num/den) in degrees as Q8.6.
pub fn atan_q6(num: i64, den: i64) -> i32 {
    round_shift(cordic_atan_deg_q16(num, den), 10) as i32
}

pub fn pack_angles(x_q6: i16, y_q6: i16) -> u32 {
    ((x_q6 as u16 as u32) << 16) | y_q6 as u16 as u32
}

pub fn unpack_angles(packed: u32) -> (i16, i16) {
    ((packed >> 16) as u16 as i16, packed as u16 as i16)
}

/// Servo angle for a platform tilt of (x, y): θ = atan((x + y) / 90°), which
/// maps the ±45° input square onto ±45° of servo travel. Q8.6 in and out.
pub fn servo_angle_q6(x_q6: i16, y_q6: i16) -> Result<i32, WorkloadError> {
    for a in [x_q6 as i32, y_q6 as i32] {
        if a.abs() > MAX_ANGLE_Q6 {
            return Err(WorkloadError::AngleRange(a));
        }
    }
    Ok(atan_q6(x_q6 as i64 + y_q6 as i64, 2 * MAX_ANGLE_Q6 as i64))
}

/// PWM = round(512 + θ/90° · 511), clamped to [0, 1023].
pub fn pwm_from_angle_q6(theta_q6: i32) -> u32 {
    let num = theta_q6 as i64 * 511;
    let den = 90 * 64;
    let q = if num >= 0 { (num + den / 2) / den } else { -((-num + den / 2) / den) };
    (PWM_NEUTRAL as i64 + q).clamp(0, PWM_MAX as i64) as u32
}

/// Packed Q8.6 angle pair in, 10-bit PWM (low bits) out.
pub fn workload_inverse_kinematics(packed: u32) -> Result<u32, WorkloadError> {
    let (x, y) = unpack_angles(packed);
    Ok(pwm_from_angle_q6(servo_angle_q6(x, y)?))
}
