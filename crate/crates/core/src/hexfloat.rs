//! C-style hexadecimal float formatting (`%a`) for exact, human-auditable
//! round trips of `f64` values in text files.

use crate::error::{Error, Result};

/// Formats a finite `f64` as `[-]0x1.<13 hex digits>p<exp>` (or `0x0p+0`,
/// or a subnormal `0x0.<digits>p-1022`). Round-trips exactly through
/// [`parse_hex_f64`].
pub fn format_hex_f64(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0x0p+0".to_string()
        } else {
            "0x0p+0".to_string()
        };
    }
    assert!(v.is_finite(), "hex float formatting of non-finite value");
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7FF) as i64;
    let mantissa = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 {
        // Subnormal: value = 0.mantissa * 2^-1022
        format!("{sign}0x0.{mantissa:013x}p-1022")
    } else {
        let exp = exp_bits - 1023;
        format!("{sign}0x1.{mantissa:013x}p{exp:+}")
    }
}

/// Parses the output of [`format_hex_f64`].
pub fn parse_hex_f64(s: &str) -> Result<f64> {
    let err = || Error::Parse(format!("invalid hex float {s:?}"));
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(err)?;
    let (mantissa_str, exp_str) = rest.split_once('p').ok_or_else(err)?;
    let exp: i64 = exp_str.parse().map_err(|_| err())?;
    let (int_part, frac_part) = match mantissa_str.split_once('.') {
        Some((i, f)) => (i, f),
        None => (mantissa_str, ""),
    };
    let int_digit = u64::from_str_radix(int_part, 16).map_err(|_| err())?;
    let mut frac = 0u64;
    let mut frac_bits = 0u32;
    for c in frac_part.chars() {
        let d = c.to_digit(16).ok_or_else(err)?;
        frac = frac
            .checked_shl(4)
            .ok_or_else(err)?
            .checked_add(d as u64)
            .ok_or_else(err)?;
        frac_bits += 4;
    }
    let mut value = int_digit as f64;
    if frac_bits > 0 {
        value += frac as f64 / 2f64.powi(frac_bits as i32);
    }
    let scaled = value * 2f64.powi(exp as i32);
    Ok(if neg { -scaled } else { scaled })
}
