//! Minimal SVG line plots of PRO curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

/// `(set name, points)` in file order.
pub type Series = Vec<(String, Vec<(f64, f64)>)>;

/// Groups a `category, limit, set, fpr, pro` table by category and limit.
pub fn parse_curves(text: &str) -> Result<BTreeMap<(String, String), Series>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "category\tlimit\tset\tfpr\tpro")) => {}
        _ => return Err("missing curve header".into()),
    }
    let mut out: BTreeMap<(String, String), Series> = BTreeMap::new();
    for (i, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let [category, limit, set, fpr, pro] = f[..] else {
            return Err(format!("line {}: expected 5 fields", i + 1));
        };
        limit.parse::<f64>().map_err(|_| format!("line {}: bad limit", i + 1))?;
        let x: f64 = fpr.parse().map_err(|_| format!("line {}: bad fpr", i + 1))?;
        let y: f64 = pro.parse().map_err(|_| format!("line {}: bad pro", i + 1))?;
        let series = out.entry((category.to_string(), limit.to_string())).or_default();
        match series.last_mut() {
            Some((name, pts)) if name == set => pts.push((x, y)),
            _ => series.push((set.to_string(), vec![(x, y)])),
        }
    }
    Ok(out)
}

pub fn limit_label(limit: &str) -> String {
    let pct = limit.parse::<f64>().map(|l| (l * 100.0 * 1e6).round() / 1e6).unwrap_or(0.0);
    format!("{pct}pct")
}

pub fn file_stem(category: &str) -> String {
    category.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

const COLORS: [&str; 5] = ["#000000", "#d62728", "#ff7f0e", "#2ca02c", "#1f77b4"];

pub fn svg(category: &str, limit: &str, series: &Series) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let xmax: f64 = limit.parse().unwrap_or(1.0);
    let px = |x: f64| m + (x / xmax).clamp(0.0, 1.0) * (w - 2.0 * m);
    let py = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">{} PRO curve, FPR up to {}</text>"#,
        w / 2.0,
        escape(category),
        limit
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m},{m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(t * xmax), h - m + 16.0, round(t * xmax));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, m - 6.0, py(t) + 4.0, round(t));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">FPR</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">PRO</text>"#, h / 2.0, h / 2.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
        let ly = m + 14.0 * i as f64 + 10.0;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, w - m - 40.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn round(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_category_and_limit() {
        let text = "category\tlimit\tset\tfpr\tpro\na\t0.3\tall\t0\t0\na\t0.3\tall\t0.3\t1\na\t0.3\tq1\t0\t0\nb\t0.05\tall\t0\t0\n";
        let c = parse_curves(text).unwrap();
        assert_eq!(c.len(), 2);
        let a = &c[&("a".to_string(), "0.3".to_string())];
        assert_eq!(a[0], ("all".to_string(), vec![(0.0, 0.0), (0.3, 1.0)]));
        assert_eq!(a[1].0, "q1");
        assert!(parse_curves("nope\n").is_err());
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = svg("a<b", "0.3", &vec![("all".into(), vec![(0.0, 0.0), (0.3, 1.0)])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(limit_label("0.05"), "5pct");
    }
}
