use serde::{Deserialize, Serialize};

pub const TRACE_HEADER: &str = "iteration,loss,psnr,ssim";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Six significant digits in the style of C's `%g`.
pub fn format_g6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// CSV with [`TRACE_HEADER`], LF line endings, empty metric fields when
/// there is no reference.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(format_g6).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration,
            format_g6(r.loss),
            opt(r.psnr),
            opt(r.ssim)
        ));
    }
    out
}
