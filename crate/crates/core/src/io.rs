//! File formats: the IF1 raw-float image container, marker JSON, the flat
//! `key = value` config format, CSV emission/parsing for metric and history
//! rows, and the run manifest.
//!
//! IF1 layout: 16 header bytes (`VKIMG001` magic plus reserved zeros), then
//! little-endian u32 width, height, channels, then `channels * h * w`
//! little-endian f32 values, row-major within each channel plane.
//! Displacement fields store two channels (x then y); masks store one channel
//! of {0.0, 1.0}. Files hold single precision; arithmetic stays double.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::EnergyParams;
use crate::error::{Error, Result};
use crate::geodesic::{Connectivity, GeodesicConfig, MarkerSet};
use crate::image::{DisplacementField, Image2D, SliceStack};
use crate::metrics::{MetricsRow, METRIC_COLUMNS};
use crate::nnet::NetConfig;
use crate::optim::{RunConfig, RunMode};
use crate::preprocess::PreprocessConfig;

pub const IF1_MAGIC: &[u8; 8] = b"VKIMG001";

/// Write bytes to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn if1_bytes(planes: &[&[f64]], width: usize, height: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 12 + planes.len() * width * height * 4);
    out.extend_from_slice(IF1_MAGIC);
    out.extend_from_slice(&[0u8; 8]);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(planes.len() as u32).to_le_bytes());
    for plane in planes {
        for &v in *plane {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn if1_parse(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    if bytes.len() < 28 || &bytes[..8] != IF1_MAGIC {
        return Err(Error::format("IF1", "bad magic or truncated header"));
    }
    let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (rd(16), rd(20), rd(24));
    if w == 0 || h == 0 || c == 0 {
        return Err(Error::format("IF1", "zero dimension"));
    }
    let need = 28 + 4 * w * h * c;
    if bytes.len() != need {
        return Err(Error::format(
            "IF1",
            format!("expected {} bytes, got {}", need, bytes.len()),
        ));
    }
    let mut planes = Vec::with_capacity(c);
    let mut off = 28;
    for _ in 0..c {
        let mut plane = Vec::with_capacity(w * h);
        for _ in 0..w * h {
            plane.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        planes.push(plane);
    }
    Ok((w, h, planes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn write_image(path: &Path, img: &Image2D) -> Result<()> {
    write_atomic(
        path,
        &if1_bytes(&[img.as_slice()], img.width(), img.height()),
    )
}

pub fn read_image(path: &Path) -> Result<Image2D> {
    let (w, h, mut planes) = if1_parse(&read_bytes(path)?)?;
    if planes.len() != 1 {
        return Err(Error::format(
            "IF1",
            format!("expected 1 channel, got {}", planes.len()),
        ));
    }
    Image2D::from_vec(w, h, planes.pop().unwrap())
}

pub fn write_field(path: &Path, u: &DisplacementField) -> Result<()> {
    write_atomic(path, &if1_bytes(&[u.ux(), u.uy()], u.width(), u.height()))
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let (w, h, planes) = if1_parse(&read_bytes(path)?)?;
    if planes.len() != 2 {
        return Err(Error::format(
            "IF1",
            format!("expected 2 channels, got {}", planes.len()),
        ));
    }
    let mut it = planes.into_iter();
    DisplacementField::from_vecs(w, h, it.next().unwrap(), it.next().unwrap())
}

/// A stack is stored as one IF1 file with one channel per slice.
pub fn write_stack(path: &Path, stack: &SliceStack) -> Result<()> {
    let planes: Vec<&[f64]> = stack.slices.iter().map(|s| s.as_slice()).collect();
    write_atomic(
        path,
        &if1_bytes(&planes, stack.slices[0].width(), stack.slices[0].height()),
    )
}

pub fn read_stack(path: &Path) -> Result<SliceStack> {
    let (w, h, planes) = if1_parse(&read_bytes(path)?)?;
    let n = planes.len();
    let slices = planes
        .into_iter()
        .map(|p| Image2D::from_vec(w, h, p))
        .collect::<Result<Vec<_>>>()?;
    SliceStack::new(slices, (0..n).collect())
}

// ---------------------------------------------------------------------------
// Markers
// ---------------------------------------------------------------------------

pub fn markers_to_json(markers: &MarkerSet) -> String {
    let pts: Vec<[u64; 2]> = markers
        .points()
        .iter()
        .map(|&(x, y)| [x as u64, y as u64])
        .collect();
    serde_json::to_string(&pts).expect("marker serialization cannot fail")
}

pub fn markers_from_json(text: &str) -> Result<MarkerSet> {
    let pts: Vec<[i64; 2]> = serde_json::from_str(text)
        .map_err(|e| Error::format("markers", e.to_string()))?;
    let mut points = Vec::with_capacity(pts.len());
    for [x, y] in pts {
        if x < 0 || y < 0 {
            return Err(Error::format("markers", format!("negative point [{x}, {y}]")));
        }
        points.push((x as usize, y as usize));
    }
    MarkerSet::new(points)
}

pub fn write_markers(path: &Path, markers: &MarkerSet) -> Result<()> {
    write_atomic(path, markers_to_json(markers).as_bytes())
}

pub fn read_markers(path: &Path) -> Result<MarkerSet> {
    markers_from_json(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Flat config format
// ---------------------------------------------------------------------------

/// Everything a run can configure, merged from one flat file.
#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub energy: EnergyParams,
    pub run: RunConfig,
    pub preprocess: PreprocessConfig,
    pub net: NetConfig,
    pub geodesic: GeodesicConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            energy: EnergyParams::default(),
            run: RunConfig::default(),
            preprocess: PreprocessConfig::default(),
            net: NetConfig::default(),
            geodesic: GeodesicConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::format("config", format!("bad value '{v}' for key '{key}'")))
}

fn parse_pair(key: &str, v: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(Error::format(
            "config",
            format!("key '{key}' expects 'a,b', got '{v}'"),
        ));
    }
    Ok((parse_num(key, parts[0])?, parse_num(key, parts[1])?))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::format(
            "config",
            format!("key '{key}' expects true/false, got '{v}'"),
        )),
    }
}

/// Parse the flat `key = value` format. Unknown keys fail fast; `#` starts a
/// comment; later keys override earlier ones.
pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(
                "config",
                format!("line {}: expected 'key = value'", lineno + 1),
            ));
        };
        let key = key.trim();
        let v = value.trim();
        match key {
            "mu" => cfg.energy.mu = parse_num(key, v)?,
            "lambda1" => cfg.energy.lambda1 = parse_num(key, v)?,
            "lambda2" => cfg.energy.lambda2 = parse_num(key, v)?,
            "beta1" => cfg.energy.beta1 = parse_num(key, v)?,
            "beta2" => cfg.energy.beta2 = parse_num(key, v)?,
            "a1" => cfg.energy.a1 = parse_num(key, v)?,
            "a2" => cfg.energy.a2 = parse_num(key, v)?,
            "c1" => cfg.energy.c1 = parse_num(key, v)?,
            "c2" => cfg.energy.c2 = parse_num(key, v)?,
            "sigma_s" => cfg.energy.sigma_s = parse_num(key, v)?,
            "eps_abs" => cfg.energy.eps_abs = parse_num(key, v)?,
            "mode" => {
                cfg.run.mode = match v {
                    "dip" => RunMode::Dip,
                    "direct" => RunMode::Direct,
                    _ => {
                        return Err(Error::format(
                            "config",
                            format!("mode must be 'dip' or 'direct', got '{v}'"),
                        ))
                    }
                }
            }
            "epochs" => cfg.run.epochs = parse_num(key, v)?,
            "lr1" => cfg.run.lr1 = parse_num(key, v)?,
            "lr2" => cfg.run.lr2 = parse_num(key, v)?,
            "checkpoint_epochs" => {
                cfg.run.checkpoint_epochs = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "seed" => cfg.run.seed = parse_num(key, v)?,
            "desk_scale" => cfg.run.desk_scale = parse_bool(key, v)?,
            "crop_rect" => {
                cfg.preprocess.crop_rect = if v == "none" {
                    None
                } else {
                    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                    if parts.len() != 4 {
                        return Err(Error::format(
                            "config",
                            format!("crop_rect expects 'x0,y0,w,h' or 'none', got '{v}'"),
                        ));
                    }
                    Some((
                        parse_num(key, parts[0])?,
                        parse_num(key, parts[1])?,
                        parse_num(key, parts[2])?,
                        parse_num(key, parts[3])?,
                    ))
                }
            }
            "target_size" => cfg.preprocess.target_size = parse_pair(key, v)?,
            "clahe_tiles" => cfg.preprocess.clahe_tiles = parse_pair(key, v)?,
            "clahe_clip" => cfg.preprocess.clahe_clip = parse_num(key, v)?,
            "skip_resize_low_contrast" => {
                cfg.preprocess.skip_resize_low_contrast = parse_bool(key, v)?
            }
            "base_filters" => cfg.net.base_filters = parse_num(key, v)?,
            "depth" => cfg.net.depth = parse_num(key, v)?,
            "dropout_rate" => cfg.net.dropout_rate = parse_num(key, v)?,
            "max_disp" => cfg.net.max_disp = parse_num(key, v)?,
            "beta_g" => cfg.geodesic.beta_g = parse_num(key, v)?,
            "connectivity" => {
                cfg.geodesic.connectivity = match v {
                    "4" => Connectivity::Four,
                    "8" => Connectivity::Eight,
                    _ => {
                        return Err(Error::format(
                            "config",
                            format!("connectivity must be 4 or 8, got '{v}'"),
                        ))
                    }
                }
            }
            _ => {
                return Err(Error::format("config", format!("unknown key '{key}'")));
            }
        }
    }
    Ok(cfg)
}

/// Canonical rendering; `parse_config(render_config(c)) == c`.
pub fn render_config(cfg: &FileConfig) -> String {
    let mut s = String::new();
    let e = &cfg.energy;
    s.push_str(&format!("mu = {}\n", e.mu));
    s.push_str(&format!("lambda1 = {}\n", e.lambda1));
    s.push_str(&format!("lambda2 = {}\n", e.lambda2));
    s.push_str(&format!("beta1 = {}\n", e.beta1));
    s.push_str(&format!("beta2 = {}\n", e.beta2));
    s.push_str(&format!("a1 = {}\n", e.a1));
    s.push_str(&format!("a2 = {}\n", e.a2));
    s.push_str(&format!("c1 = {}\n", e.c1));
    s.push_str(&format!("c2 = {}\n", e.c2));
    s.push_str(&format!("sigma_s = {}\n", e.sigma_s));
    s.push_str(&format!("eps_abs = {}\n", e.eps_abs));
    let r = &cfg.run;
    s.push_str(&format!(
        "mode = {}\n",
        match r.mode {
            RunMode::Dip => "dip",
            RunMode::Direct => "direct",
        }
    ));
    s.push_str(&format!("epochs = {}\n", r.epochs));
    s.push_str(&format!("lr1 = {}\n", r.lr1));
    s.push_str(&format!("lr2 = {}\n", r.lr2));
    s.push_str(&format!(
        "checkpoint_epochs = {}\n",
        r.checkpoint_epochs
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    s.push_str(&format!("seed = {}\n", r.seed));
    s.push_str(&format!("desk_scale = {}\n", r.desk_scale));
    let p = &cfg.preprocess;
    s.push_str(&format!(
        "crop_rect = {}\n",
        match p.crop_rect {
            None => "none".to_string(),
            Some((x, y, w, h)) => format!("{x},{y},{w},{h}"),
        }
    ));
    s.push_str(&format!(
        "target_size = {},{}\n",
        p.target_size.0, p.target_size.1
    ));
    s.push_str(&format!(
        "clahe_tiles = {},{}\n",
        p.clahe_tiles.0, p.clahe_tiles.1
    ));
    s.push_str(&format!("clahe_clip = {}\n", p.clahe_clip));
    s.push_str(&format!(
        "skip_resize_low_contrast = {}\n",
        p.skip_resize_low_contrast
    ));
    let n = &cfg.net;
    s.push_str(&format!("base_filters = {}\n", n.base_filters));
    s.push_str(&format!("depth = {}\n", n.depth));
    s.push_str(&format!("dropout_rate = {}\n", n.dropout_rate));
    s.push_str(&format!("max_disp = {}\n", n.max_disp));
    let g = &cfg.geodesic;
    s.push_str(&format!("beta_g = {}\n", g.beta_g));
    s.push_str(&format!(
        "connectivity = {}\n",
        match g.connectivity {
            Connectivity::Four => "4",
            Connectivity::Eight => "8",
        }
    ));
    s
}

pub fn write_config(path: &Path, cfg: &FileConfig) -> Result<()> {
    write_atomic(path, render_config(cfg).as_bytes())
}

pub fn read_config(path: &Path) -> Result<FileConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Metric rows keyed by slice and epoch, header first, columns in the
/// canonical order.
pub fn metrics_csv(rows: &[(usize, usize, MetricsRow)]) -> String {
    let mut s = String::from("slice,epoch,");
    s.push_str(&METRIC_COLUMNS.join(","));
    s.push('\n');
    for (slice, epoch, row) in rows {
        s.push_str(&format!("{slice},{epoch}"));
        for v in row.to_array() {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Parse a metrics CSV; leading identity columns are allowed and located by
/// name. Returns `(slice, epoch, row)` triples (identity defaults to 0 when
/// the columns are absent).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(usize, usize, MetricsRow)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("metrics csv", "empty file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| cols.iter().position(|&c| c == name);
    let metric_idx: Vec<usize> = METRIC_COLUMNS
        .iter()
        .map(|&name| {
            find(name).ok_or_else(|| Error::format("metrics csv", format!("missing column {name}")))
        })
        .collect::<Result<_>>()?;
    let slice_idx = find("slice");
    let epoch_idx = find("epoch");
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::format(
                "metrics csv",
                format!("row {}: expected {} fields, got {}", lineno + 2, cols.len(), fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::format("metrics csv", format!("bad number '{}'", fields[i])))
        };
        let mut vals = [0.0; 10];
        for (k, &i) in metric_idx.iter().enumerate() {
            vals[k] = num(i)?;
        }
        let slice = match slice_idx {
            Some(i) => num(i)? as usize,
            None => 0,
        };
        let epoch = match epoch_idx {
            Some(i) => num(i)? as usize,
            None => 0,
        };
        out.push((slice, epoch, MetricsRow::from_array(vals)));
    }
    Ok(out)
}

/// Per-epoch loss breakdown CSV.
pub fn history_csv(history: &[crate::energy::EnergyBreakdown]) -> String {
    let mut s = String::from("epoch,fidelity,seg_t,seg_r,global,local,total\n");
    for (i, b) in history.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i + 1,
            b.term_fidelity,
            b.term_seg_t,
            b.term_seg_r,
            b.term_global,
            b.term_local,
            b.total
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// Reproducibility envelope written next to every command's outputs. The
/// config snapshot plus seed and input paths are sufficient to re-run the job
/// bit-identically; timings are informational.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config_snapshot: String,
    pub inputs: Vec<String>,
    pub out_dir: String,
    pub wall_clock_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &FileConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config_snapshot: render_config(config),
            inputs: Vec::new(),
            out_dir: String::new(),
            wall_clock_seconds: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        write_atomic(path, json.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("segreg-io-{name}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn image_roundtrip_is_byte_identical() {
        let dir = tmpdir("img");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image2D::from_fn(13, 9, |_, _| rng.random_range(0.0..1.0));
        let p1 = dir.join("a.if1");
        let p2 = dir.join("b.if1");
        write_image(&p1, &img).unwrap();
        let back = read_image(&p1).unwrap();
        write_image(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // Values survive the f32 storage within f32 precision.
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn field_roundtrip_is_byte_identical() {
        let dir = tmpdir("field");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut u = DisplacementField::zeros(7, 5);
        for i in 0..35 {
            u.ux_mut()[i] = rng.random_range(-3.0..3.0);
            u.uy_mut()[i] = rng.random_range(-3.0..3.0);
        }
        let p1 = dir.join("u.if1");
        let p2 = dir.join("v.if1");
        write_field(&p1, &u).unwrap();
        let back = read_field(&p1).unwrap();
        write_field(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn stack_roundtrip() {
        let dir = tmpdir("stack");
        let s = SliceStack::new(
            vec![Image2D::constant(4, 3, 0.25), Image2D::constant(4, 3, 0.5)],
            vec![0, 1],
        )
        .unwrap();
        let p = dir.join("s.if1");
        write_stack(&p, &s).unwrap();
        let back = read_stack(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.slices[1].get(0, 0), 0.5);
    }

    #[test]
    fn if1_rejects_garbage() {
        assert!(if1_parse(b"not an image").is_err());
        let mut ok = if1_bytes(&[&[0.0, 1.0, 2.0, 3.0]], 2, 2);
        ok.truncate(ok.len() - 1);
        assert!(if1_parse(&ok).is_err());
    }

    #[test]
    fn markers_roundtrip_and_validation() {
        let dir = tmpdir("markers");
        let m = MarkerSet::new(vec![(3, 4), (10, 2)]).unwrap();
        let p1 = dir.join("m.json");
        let p2 = dir.join("n.json");
        write_markers(&p1, &m).unwrap();
        let back = read_markers(&p1).unwrap();
        write_markers(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(back.points(), m.points());

        assert!(markers_from_json("[[1, -2]]").is_err());
        assert!(markers_from_json("[]").is_err());
        assert!(markers_from_json("{\"a\": 1}").is_err());
    }

    #[test]
    fn config_roundtrip_is_byte_identical() {
        let dir = tmpdir("config");
        let mut cfg = FileConfig::default();
        cfg.energy.mu = 12.5;
        cfg.run.epochs = 77;
        cfg.run.checkpoint_epochs = vec![10, 77];
        cfg.preprocess.crop_rect = Some((4, 8, 100, 120));
        cfg.net.base_filters = 16;
        let p1 = dir.join("a.cfg");
        let p2 = dir.join("b.cfg");
        write_config(&p1, &cfg).unwrap();
        let back = read_config(&p1).unwrap();
        assert_eq!(back, cfg);
        write_config(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = parse_config("mu = 3\nnot_a_key = 7\n");
        assert!(err.is_err());
        let msg = format!("{}", err.unwrap_err());
        assert!(msg.contains("not_a_key"), "{msg}");
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(parse_config("mu = banana\n").is_err());
        assert!(parse_config("mode = sideways\n").is_err());
        assert!(parse_config("mu 3\n").is_err());
        assert!(parse_config("connectivity = 6\n").is_err());
    }

    #[test]
    fn config_allows_comments_and_blanks() {
        let cfg = parse_config("# a comment\n\nmu = 3 # trailing\n").unwrap();
        assert_eq!(cfg.energy.mu, 3.0);
    }

    #[test]
    fn metrics_csv_roundtrip_with_nan() {
        let mut row = MetricsRow::from_array([0.9, 0.8, 30.0, 0.1, 0.05, 0.7, 0.6, 0.5, 0.4, 0.3]);
        row.dice = f64::NAN;
        let text = metrics_csv(&[(0, 50, row), (1, 200, row)]);
        let parsed = parse_metrics_csv(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].1, 50);
        assert_eq!(parsed[1].0, 1);
        assert!(parsed[0].2.dice.is_nan());
        assert_eq!(parsed[0].2.ncc, 0.9);
        // Second serialization is identical.
        let text2 = metrics_csv(&parsed.iter().map(|&(s, e, r)| (s, e, r)).collect::<Vec<_>>());
        assert_eq!(text, text2);
    }

    #[test]
    fn metrics_csv_rejects_missing_columns() {
        assert!(parse_metrics_csv("NCC,SSIM\n0.5,0.5\n").is_err());
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let b = crate::energy::EnergyBreakdown {
            term_fidelity: 1.0,
            term_seg_t: 0.5,
            term_seg_r: 0.25,
            term_global: 2.0,
            term_local: 0.125,
            total: 3.875,
        };
        let text = history_csv(&[b, b, b]);
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("epoch,fidelity"));
    }

    #[test]
    fn manifest_serializes() {
        let m = RunManifest::new("phantom", 7, &FileConfig::default());
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"seed\":7"));
        let back: RunManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.command, "phantom");
    }
}
