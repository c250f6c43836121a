//! CSV float formatting. Byte-stable output is part of the CLI contract, so
//! every float that reaches a CSV goes through one formatter.

/// Formats a float for CSV output.
///
/// Uses plain decimal notation in the comfortable range and exponent
/// notation outside it, so sweep columns spanning hundreds of orders of
/// magnitude stay readable. The output is a pure function of the bit
/// pattern, which is what makes replayed runs byte-identical.
pub(crate) fn f64_csv(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let mag = x.abs();
    if (1e-4..1e15).contains(&mag) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub(crate) fn bool_csv(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}
