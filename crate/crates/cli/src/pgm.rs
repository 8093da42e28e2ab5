//! ASCII heatmaps of masked attention.

use std::fmt::Write;

/// Pixel values of `mask ⊙ A` for an `n × n` head, each row scaled by its
/// own maximum. Rows whose masked maximum is zero stay black.
pub fn pixels(probs: &[f64], mask: &[f64], n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| mask[i * n + j] * probs[i * n + j]).collect();
        let max = row.iter().copied().fold(0.0, f64::max);
        for v in row {
            let p = if max > 0.0 { (255.0 * v / max).round() } else { 0.0 };
            out.push(p as u8);
        }
    }
    out
}

/// P2 image, maxval 255, one text line per row.
pub fn heatmap(probs: &[f64], mask: &[f64], n: usize) -> String {
    let px = pixels(probs, mask, n);
    let mut s = format!("P2\n{n} {n}\n255\n");
    for row in px.chunks(n.max(1)) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn mask_csv(mask: &[f64], n: usize) -> String {
    let mut s = String::new();
    for row in mask.chunks(n.max(1)) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(s, "{}", cells.join(",")).expect("write to string");
    }
    s
}

/// Parses a P2 image back into `(width, height, pixels)`.
pub fn parse(text: &str) -> Option<(usize, usize, Vec<u32>)> {
    let mut it = text.split_whitespace();
    if it.next()? != "P2" {
        return None;
    }
    let w = it.next()?.parse().ok()?;
    let h = it.next()?.parse().ok()?;
    if it.next()? != "255" {
        return None;
    }
    let px: Vec<u32> = it.map(|t| t.parse().ok()).collect::<Option<_>>()?;
    (px.len() == w * h).then_some((w, h, px))
}
