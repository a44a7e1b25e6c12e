//! Text conventions shared by every file and report: numbers with six
//! significant digits, and the spellings of dimensions and layouts.

use gpmkl::{LayoutKind, VolumeDims};

/// `x` with six significant digits, in the style of C's `%g`.
pub fn sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// `NX,NY,NZ`.
pub fn parse_dims(s: &str) -> Result<VolumeDims, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [nx, ny, nz] = parts.as_slice() else {
        return Err(format!("expected NX,NY,NZ, got {s:?}"));
    };
    let num = |v: &str| v.parse::<usize>().map_err(|_| format!("bad dimension {v:?}"));
    VolumeDims::new(num(nx)?, num(ny)?, num(nz)?).map_err(|e| e.to_string())
}

/// `single`, `slices` or `cube:E`.
pub fn parse_layout(s: &str) -> Result<LayoutKind, String> {
    match s {
        "single" => Ok(LayoutKind::Single),
        "slices" => Ok(LayoutKind::Slices),
        _ => {
            let edge = s
                .strip_prefix("cube:")
                .ok_or_else(|| format!("expected single, slices or cube:E, got {s:?}"))?;
            match edge.parse::<usize>() {
                Ok(edge) if edge > 0 => Ok(LayoutKind::Cubes { edge }),
                _ => Err(format!("bad cube edge {edge:?}")),
            }
        }
    }
}

pub fn layout_name(kind: LayoutKind) -> String {
    match kind {
        LayoutKind::Single => "single".into(),
        LayoutKind::Slices => "slices".into(),
        LayoutKind::Cubes { edge } => format!("cube:{edge}"),
        LayoutKind::Custom => "custom".into(),
    }
}
