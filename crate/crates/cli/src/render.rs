//! Choropleth maps as standalone SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Context, Result};

/// Rings of planar `(x, y)` vertices per area id.
pub type Polygons = BTreeMap<String, Vec<Vec<[f64; 2]>>>;

pub fn parse_polygons(text: &str) -> Result<Polygons> {
    let polys: Polygons = serde_json::from_str(text).context("polygons file must map ids to lists of rings")?;
    for (id, rings) in &polys {
        if rings.is_empty() || rings.iter().any(|r| r.len() < 3) {
            bail!("polygon {id:?} needs at least one ring of three vertices");
        }
        if rings.iter().flatten().flatten().any(|v| !v.is_finite()) {
            bail!("polygon {id:?} has non-finite coordinates");
        }
    }
    Ok(polys)
}

/// Unit squares for a `rows x cols` lattice, ids `1..=rows*cols` in row-major
/// order with row 1 at the top.
pub fn lattice_polygons(rows: usize, cols: usize) -> Polygons {
    let mut out = Polygons::new();
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (c as f64, (rows - 1 - r) as f64);
            let ring = vec![[x, y], [x + 1.0, y], [x + 1.0, y + 1.0], [x, y + 1.0]];
            out.insert((r * cols + c + 1).to_string(), vec![ring]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapValue {
    pub id: String,
    pub value: f64,
    pub flagged: bool,
}

/// Reads `id` plus a value column (default: the second column) and an
/// optional boolean flag column (`true`/`false` or `1`/`0`).
pub fn read_values(text: &str, value_col: Option<&str>, flag_col: Option<&str>) -> Result<Vec<MapValue>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("values file has no column {name:?}"))
    };
    let id = col("id")?;
    let value = match value_col {
        Some(name) => col(name)?,
        None => (0..header.len()).find(|&c| c != id).context("values file needs a value column")?,
    };
    let flag = flag_col.map(col).transpose()?;
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let v: f64 = rec[value]
            .parse()
            .with_context(|| format!("line {line}: value {:?} is not a number", &rec[value]))?;
        let flagged = match flag.map(|c| &rec[c]) {
            None | Some("false" | "0" | "") => false,
            Some("true" | "1") => true,
            Some(other) => bail!("line {line}: flag {other:?} is not a boolean"),
        };
        out.push(MapValue { id: rec[id].to_string(), value: v, flagged });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ramp {
    /// Pale yellow to dark red over `[min, max]`.
    Linear,
    /// Blue below the midpoint, red above, white at it; symmetric range.
    Diverging { midpoint: f64 },
}

type Rgb = [f64; 3];

const SEQ: [Rgb; 3] = [[255.0, 255.0, 204.0], [253.0, 141.0, 60.0], [128.0, 0.0, 38.0]];
const DIV: [Rgb; 3] = [[33.0, 102.0, 172.0], [247.0, 247.0, 247.0], [178.0, 24.0, 43.0]];

fn lerp3(stops: &[Rgb; 3], t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (a, b, u) = if t < 0.5 { (stops[0], stops[1], 2.0 * t) } else { (stops[1], stops[2], 2.0 * t - 1.0) };
    let c: Vec<u8> = (0..3).map(|k| (a[k] + u * (b[k] - a[k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

impl Ramp {
    /// Domain `(lo, hi)` of the legend for the given values.
    fn domain(self, values: &[f64]) -> (f64, f64) {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match self {
            Ramp::Linear => (min, max),
            Ramp::Diverging { midpoint } => {
                let half = (max - midpoint).abs().max((midpoint - min).abs());
                (midpoint - half, midpoint + half)
            }
        }
    }

    /// Position of `v` in `[0, 1]`; the midpoint of a diverging ramp maps to 0.5.
    pub fn position(self, v: f64, (lo, hi): (f64, f64)) -> f64 {
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.5
        }
    }

    pub fn color(self, t: f64) -> String {
        match self {
            Ramp::Linear => lerp3(&SEQ, t),
            Ramp::Diverging { .. } => lerp3(&DIV, t),
        }
    }
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Area-weighted centroid of the largest ring.
fn centroid(rings: &[Vec<[f64; 2]>]) -> [f64; 2] {
    let area_of = |r: &[[f64; 2]]| -> (f64, [f64; 2]) {
        let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
        for k in 0..r.len() {
            let [x0, y0] = r[k];
            let [x1, y1] = r[(k + 1) % r.len()];
            let cross = x0 * y1 - x1 * y0;
            a += cross;
            cx += (x0 + x1) * cross;
            cy += (y0 + y1) * cross;
        }
        if a.abs() < 1e-300 {
            let n = r.len() as f64;
            return (0.0, [r.iter().map(|p| p[0]).sum::<f64>() / n, r.iter().map(|p| p[1]).sum::<f64>() / n]);
        }
        (a.abs() / 2.0, [cx / (3.0 * a), cy / (3.0 * a)])
    };
    rings
        .iter()
        .map(|r| area_of(r))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
        .unwrap_or([0.0, 0.0])
}

fn star(cx: f64, cy: f64, r: f64) -> String {
    (0..10)
        .map(|k| {
            let rad = if k % 2 == 0 { r } else { 0.4 * r };
            let a = std::f64::consts::PI * (k as f64 / 5.0 - 0.5);
            format!("{:.2},{:.2}", cx + rad * a.cos(), cy + rad * a.sin())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

const MAP_W: f64 = 600.0;
const LEGEND_W: f64 = 110.0;
const PAD: f64 = 10.0;

/// Renders filled polygons, a vertical legend and star markers on flagged
/// areas. Every value row needs a polygon and every polygon a value.
pub fn render_svg(polys: &Polygons, values: &[MapValue], ramp: Ramp, title: &str) -> Result<String> {
    if values.is_empty() {
        bail!("no values to map");
    }
    let by_id: BTreeMap<&str, &MapValue> = values.iter().map(|v| (v.id.as_str(), v)).collect();
    if by_id.len() != values.len() {
        bail!("values file repeats ids");
    }
    let missing: Vec<&str> = values.iter().map(|v| v.id.as_str()).filter(|id| !polys.contains_key(*id)).collect();
    if !missing.is_empty() {
        bail!("no polygon for ids: {}", missing.join(", "));
    }
    let unvalued: Vec<&str> = polys.keys().map(String::as_str).filter(|id| !by_id.contains_key(id)).collect();
    if !unvalued.is_empty() {
        bail!("no value for polygon ids: {}", unvalued.join(", "));
    }
    if let Some(v) = values.iter().find(|v| !v.value.is_finite()) {
        bail!("value of {:?} is not finite", v.id);
    }

    let pts = polys.values().flatten().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let scale = MAP_W / span;
    let map_h = (y1 - y0) * scale;
    let height = map_h.max(200.0) + 2.0 * PAD + 24.0;
    let width = (x1 - x0) * scale + LEGEND_W + 3.0 * PAD;
    let tx = |x: f64| PAD + (x - x0) * scale;
    // planar y grows upwards, SVG y downwards
    let ty = |y: f64| PAD + 24.0 + (y1 - y) * scale;

    let raw: Vec<f64> = values.iter().map(|v| v.value).collect();
    let dom = ramp.domain(&raw);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.2} {height:.2}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="14">{}</text>"#,
        PAD + 12.0,
        escape(title)
    );
    let _ = writeln!(s, r##"<g id="areas" stroke="#444" stroke-width="0.5" fill-rule="evenodd">"##);
    for (id, rings) in polys {
        let v = by_id[id.as_str()];
        let mut d = String::new();
        for ring in rings {
            for (k, p) in ring.iter().enumerate() {
                let _ = write!(d, "{}{:.2} {:.2} ", if k == 0 { "M" } else { "L" }, tx(p[0]), ty(p[1]));
            }
            d.push_str("Z ");
        }
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="{}"><title>{}: {}</title></path>"#,
            d.trim_end(),
            ramp.color(ramp.position(v.value, dom)),
            escape(id),
            fmt_num(v.value)
        );
    }
    let _ = writeln!(s, "</g>");

    let flagged: Vec<&MapValue> = values.iter().filter(|v| v.flagged).collect();
    if !flagged.is_empty() {
        let r = (0.012 * MAP_W).max(4.0);
        let _ = writeln!(s, r#"<g id="flags" fill="white" stroke="black" stroke-width="0.8">"#);
        for v in flagged {
            let [cx, cy] = centroid(&polys[&v.id]);
            let _ = writeln!(s, r#"<polygon points="{}"><title>{}</title></polygon>"#, star(tx(cx), ty(cy), r), escape(&v.id));
        }
        let _ = writeln!(s, "</g>");
    }

    // legend: stacked colour steps, high values on top
    let lx = PAD * 2.0 + (x1 - x0) * scale;
    let (ltop, lh, steps) = (PAD + 34.0, 160.0, 32);
    let _ = writeln!(s, r#"<g id="legend" font-family="sans-serif" font-size="11">"#);
    for k in 0..steps {
        let t = 1.0 - (k as f64 + 0.5) / steps as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.2}" y="{:.2}" width="18" height="{:.2}" fill="{}"/>"#,
            ltop + k as f64 * lh / steps as f64,
            lh / steps as f64 + 0.3,
            ramp.color(t)
        );
    }
    let _ = writeln!(s, r##"<rect x="{lx:.2}" y="{ltop:.2}" width="18" height="{lh:.2}" fill="none" stroke="#444" stroke-width="0.5"/>"##);
    let mut ticks = vec![(0.0, dom.1), (1.0, dom.0)];
    if let Ramp::Diverging { midpoint } = ramp {
        ticks.push((0.5, midpoint));
    }
    for (frac, v) in ticks {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 24.0, ltop + frac * lh + 4.0, fmt_num(v));
    }
    let _ = writeln!(s, "</g>\n</svg>");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn squares() -> Polygons {
        parse_polygons(r#"{"a": [[[0,0],[1,0],[1,1],[0,1]]], "b": [[[1,0],[2,0],[2,1],[1,1]]]}"#).unwrap()
    }

    fn vals(v: &[(&str, f64, bool)]) -> Vec<MapValue> {
        v.iter()
            .map(|&(id, value, flagged)| MapValue { id: id.into(), value, flagged })
            .collect()
    }

    #[test]
    fn two_squares_make_two_paths_and_a_legend() {
        let svg = render_svg(&squares(), &vals(&[("a", 0.0, false), ("b", 1.0, false)]), Ramp::Linear, "t").unwrap();
        assert_eq!(svg.matches("<path ").count(), 2);
        assert!(svg.contains(r#"id="legend""#));
        assert!(!svg.contains(r#"id="flags""#));
    }

    #[test]
    fn flags_draw_stars() {
        let svg = render_svg(&squares(), &vals(&[("a", 0.0, true), ("b", 1.0, false)]), Ramp::Linear, "t").unwrap();
        assert_eq!(svg.matches("<polygon ").count(), 1);
    }

    #[test]
    fn diverging_arms() {
        let ramp = Ramp::Diverging { midpoint: 1.0 };
        let dom = ramp.domain(&[0.5, 1.0, 3.0]);
        assert_eq!(dom, (-1.0, 3.0));
        assert_eq!(ramp.position(1.0, dom), 0.5);
        assert!(ramp.position(0.5, dom) < 0.5 && ramp.position(3.0, dom) > 0.5);
        assert_eq!(ramp.color(0.5), "#f7f7f7");
        // blue arm below, red arm above
        let lo = ramp.color(ramp.position(0.5, dom));
        let hi = ramp.color(ramp.position(3.0, dom));
        let channel = |c: &str, k: usize| u8::from_str_radix(&c[1 + 2 * k..3 + 2 * k], 16).unwrap();
        assert!(channel(&lo, 2) > channel(&lo, 0));
        assert!(channel(&hi, 0) > channel(&hi, 2));
    }

    #[test]
    fn missing_polygons_are_listed() {
        let err = render_svg(&squares(), &vals(&[("a", 0.0, false), ("b", 1.0, false), ("zz", 2.0, false)]), Ramp::Linear, "t")
            .unwrap_err()
            .to_string();
        assert!(err.contains("zz"), "{err}");
        assert!(render_svg(&squares(), &vals(&[("a", 0.0, false)]), Ramp::Linear, "t").is_err());
    }

    #[test]
    fn reads_values_and_flags() {
        let v = read_values("id,kappa_mean,kappa_upper,outlier\na,0.5,0.9,true\nb,1.1,1.8,false\n", Some("kappa_upper"), Some("outlier")).unwrap();
        assert_eq!(v, vals(&[("a", 0.9, true), ("b", 1.8, false)]));
        let v = read_values("id,b_mean\na,0.25\n", None, None).unwrap();
        assert_eq!(v, vals(&[("a", 0.25, false)]));
        assert!(read_values("id,v\na,x\n", None, None).is_err());
        assert!(read_values("id,v\na,1\n", Some("w"), None).is_err());
    }

    #[test]
    fn lattice_squares_tile() {
        let p = lattice_polygons(2, 3);
        assert_eq!(p.len(), 6);
        assert_eq!(p["1"][0][0], [0.0, 1.0]);
        assert_eq!(centroid(&p["6"]), [2.5, 0.5]);
    }

    #[test]
    fn constant_values_render() {
        let svg = render_svg(&squares(), &vals(&[("a", 2.0, false), ("b", 2.0, false)]), Ramp::Linear, "t").unwrap();
        assert!(svg.contains("<title>a: 2</title>"));
    }
}
