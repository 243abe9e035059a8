//! Synthetic chest-film surrogates, PGM import/export and client partitioning.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fedleak_tensor::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attributes {
    pub attr_binary: u8,
    pub attr_scalar: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    pub label: u8,
    pub attributes: Option<Attributes>,
}

/// Render `n` synthetic images.
///
/// Every image shows a torso with two darker lung fields and a brighter
/// spine. `attr_binary` widens the torso, `attr_scalar` sets the global
/// contrast, and label 1 adds a bright blob inside one lung field.
pub fn generate_synthetic(n: usize, side: usize, class_balance: f64, rng: &RngStream) -> Result<Vec<LabeledImage>> {
    if n == 0 || side < 4 {
        return Err(CoreError::Invalid(format!("need n >= 1 and side >= 4, got n={n}, side={side}")));
    }
    if !(class_balance > 0.0 && class_balance < 1.0) {
        return Err(CoreError::Invalid(format!("class balance {class_balance} outside (0,1)")));
    }
    Ok((0..n).map(|i| render(side, class_balance, &mut rng.child(i.to_string()))).collect())
}

fn smooth_inside(d2: f64) -> f64 {
    // 1 inside the unit ellipse, 0 outside, with a soft rim
    let d = d2.sqrt();
    ((1.15 - d) / 0.3).clamp(0.0, 1.0)
}

fn render(side: usize, balance: f64, r: &mut RngStream) -> LabeledImage {
    let label = u8::from(r.bernoulli(balance));
    let attr_binary = u8::from(r.bernoulli(0.5));
    let attr_scalar = r.uniform() as f32;
    let contrast = 0.55 + 0.45 * attr_scalar as f64;

    // patient position, size and exposure vary from film to film
    let cx = 0.5 + r.uniform_range(-0.08, 0.08);
    let cy = 0.52 + r.uniform_range(-0.07, 0.07);
    let scale = r.uniform_range(0.82, 1.12);
    let half_w = scale * if attr_binary == 1 { 0.43 } else { 0.31 };
    let half_h = scale * r.uniform_range(0.4, 0.5);
    let lung_dx = 0.55 * half_w;
    let lung_rx = 0.33 * half_w;
    let lung_ry = scale * r.uniform_range(0.22, 0.3);
    let exposure = r.uniform_range(-0.08, 0.08);
    let rib_freq = r.uniform_range(14.0, 22.0);
    let rib_phase = r.uniform_range(0.0, std::f64::consts::TAU);
    let rib_amp = r.uniform_range(0.02, 0.07);
    let shadows: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| (r.uniform(), r.uniform(), r.uniform_range(0.08, 0.2), r.uniform_range(-0.12, 0.12)))
        .collect();

    let lesion = (label == 1).then(|| {
        let side_sign = if r.bernoulli(0.5) { 1.0 } else { -1.0 };
        let lx = cx + side_sign * lung_dx + r.uniform_range(-0.3, 0.3) * lung_rx;
        let ly = cy + r.uniform_range(-0.45, 0.45) * lung_ry;
        let rad = r.uniform_range(0.09, 0.13);
        (lx, ly, rad)
    });

    let body = 0.2 + 0.5 * contrast + exposure;
    let lung = body - 0.32 * contrast;
    let spine = body + 0.18 * contrast;
    let mut data = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let (u, v) = ((j as f64 + 0.5) / side as f64, (i as f64 + 0.5) / side as f64);
            let torso = smooth_inside(((u - cx) / half_w).powi(2) + ((v - cy) / half_h).powi(2));
            let lungs = smooth_inside(((u - cx + lung_dx) / lung_rx).powi(2) + ((v - cy) / lung_ry).powi(2))
                .max(smooth_inside(((u - cx - lung_dx) / lung_rx).powi(2) + ((v - cy) / lung_ry).powi(2)));
            let spine_w = ((0.045 - (u - cx).abs()) / 0.03).clamp(0.0, 1.0) * torso;
            let mut p = 0.04 + torso * (body - 0.04);
            p += lungs * (lung - body) * torso;
            p += lungs * torso * rib_amp * (rib_freq * v + rib_phase).sin();
            p += spine_w * (spine - p).max(0.0);
            for &(sx, sy, sr, amp) in &shadows {
                p += amp * torso * (-((u - sx).powi(2) + (v - sy).powi(2)) / (sr * sr)).exp();
            }
            if let Some((lx, ly, rad)) = lesion {
                let d2 = ((u - lx).powi(2) + (v - ly).powi(2)) / (rad * rad);
                p += 0.5 * (-1.5 * d2).exp();
            }
            p += 0.025 * r.normal();
            data.push(p.clamp(0.0, 1.0) as f32);
        }
    }
    LabeledImage {
        image: Tensor::new(vec![side, side], data).expect("side*side pixels"),
        label,
        attributes: Some(Attributes { attr_binary, attr_scalar }),
    }
}

/// Train/val/test sizes for a client holding `n` images.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    if n >= 50 {
        let train = n * 7 / 10;
        let val = n * 15 / 100;
        (train, val, n - train - val)
    } else if n >= 10 {
        let third = n / 3;
        (n - 2 * third, third, third)
    } else {
        (n, 0, 0)
    }
}

/// Split a client's items in order into train, val and test.
pub fn split_client<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (tr, va, _) = split_sizes(items.len());
    (items[..tr].to_vec(), items[tr..tr + va].to_vec(), items[tr + va..].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceTag {
    #[serde(rename = "A_large")]
    ALarge,
    #[serde(rename = "B_small_1")]
    BSmall1,
    #[serde(rename = "B_small_2")]
    BSmall2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleGroup {
    pub count: usize,
    pub size: usize,
    pub source: SourceTag,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientSchedule {
    pub groups: Vec<ScheduleGroup>,
}

impl ClientSchedule {
    fn from_rows(rows: &[(usize, usize, SourceTag)]) -> Self {
        Self {
            groups: rows.iter().map(|&(count, size, source)| ScheduleGroup { count, size, source }).collect(),
        }
    }

    /// The 14 clients of the smaller source's first split.
    pub fn small_source() -> Self {
        use SourceTag::BSmall1 as B;
        Self::from_rows(&[(2, 500, B), (2, 200, B), (2, 100, B), (2, 30, B), (2, 10, B), (2, 2, B), (2, 1, B)])
    }

    /// The 17 clients of the smaller source's second split.
    pub fn tiny_source() -> Self {
        use SourceTag::BSmall2 as B;
        Self::from_rows(&[(2, 30, B), (5, 10, B), (5, 2, B), (5, 1, B)])
    }

    /// The five large clients at 1:100 scale.
    pub fn large_source() -> Self {
        use SourceTag::ALarge as A;
        Self::from_rows(&[(1, 273, A), (1, 265, A), (1, 273, A), (1, 269, A), (1, 263, A)])
    }

    /// All 36 clients: small source, large source, tiny source.
    pub fn full() -> Self {
        let mut groups = Self::small_source().groups;
        groups.extend(Self::large_source().groups);
        groups.extend(Self::tiny_source().groups);
        Self { groups }
    }

    /// Twelve-client desk schedule: two large clients and one pair per small size.
    pub fn desk12() -> Self {
        use SourceTag::{ALarge as A, BSmall1 as B};
        Self::from_rows(&[(2, 270, A), (2, 100, B), (2, 30, B), (2, 10, B), (2, 2, B), (2, 1, B)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.groups.iter().any(|g| g.count == 0 || g.size == 0) {
            return Err(CoreError::Invalid("schedule counts and sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn total_images(&self) -> usize {
        self.groups.iter().map(|g| g.count * g.size).sum()
    }

    /// (size, source) per client, in client-id order.
    pub fn clients(&self) -> Vec<(usize, SourceTag)> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n((g.size, g.source), g.count))
            .collect()
    }
}

/// Indices into the source dataset held by one client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub id: usize,
    pub source: SourceTag,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Assign dataset indices `0..dataset_len` to clients without replacement.
pub fn partition(dataset_len: usize, schedule: &ClientSchedule, rng: &RngStream) -> Result<Vec<ClientPartition>> {
    schedule.validate()?;
    let need = schedule.total_images();
    if dataset_len < need {
        return Err(CoreError::Data(format!("schedule needs {need} images, dataset has {dataset_len}")));
    }
    let order = rng.child("partition").permutation(dataset_len);
    let mut at = 0;
    let mut out = Vec::new();
    for (id, (size, source)) in schedule.clients().into_iter().enumerate() {
        let (train, val, test) = split_client(&order[at..at + size]);
        at += size;
        out.push(ClientPartition {
            id,
            source,
            train,
            val,
            test,
        });
    }
    Ok(out)
}

/// Indices of `0..dataset_len` not held by any client.
pub fn unassigned(dataset_len: usize, parts: &[ClientPartition]) -> Vec<usize> {
    let mut used = vec![false; dataset_len];
    for p in parts {
        for &i in p.train.iter().chain(&p.val).chain(&p.test) {
            used[i] = true;
        }
    }
    (0..dataset_len).filter(|&i| !used[i]).collect()
}

#[derive(Serialize, Deserialize)]
pub struct PartitionManifest {
    pub dataset_len: usize,
    pub clients: Vec<ClientPartition>,
}

/// Pixels scaled to 8 bits with round-half-up.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn write_pgm<W: Write>(mut w: W, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(CoreError::Shape(format!("PGM needs a rank-2 image, got {s:?}")));
    }
    let mut buf = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    buf.extend(image.data().iter().map(|&v| quantize(v)));
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| CoreError::Data(format!("malformed PGM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("dimensions or maxval out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != w * h {
        return Err(bad(&format!("raster has {} bytes, expected {}", raster.len(), w * h)));
    }
    let data = raster.iter().map(|&b| b as f32 / maxval as f32).collect();
    Ok(Tensor::new(vec![h, w], data)?)
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    filename: String,
    label: u8,
    #[serde(default)]
    attr_binary: Option<u8>,
    #[serde(default)]
    attr_scalar: Option<f32>,
}

/// Load labeled PGM images listed in `labels_csv` from `dir`.
pub fn import_grayscale_dir(dir: &Path, labels_csv: &Path) -> Result<Vec<LabeledImage>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(labels_csv)?;
    let present: HashMap<String, PathBuf> = fs::read_dir(dir)
        .map_err(CoreError::at(dir))?
        .filter_map(|e| e.ok())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    let mut out = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for row in reader.deserialize::<LabelRow>() {
        let row = row?;
        let path = present
            .get(&row.filename)
            .ok_or_else(|| CoreError::Data(format!("unknown file {} in labels", row.filename)))?;
        let image = read_pgm(&fs::read(path).map_err(CoreError::at(path))?)?;
        match &shape {
            None => shape = Some(image.shape().to_vec()),
            Some(s) if s.as_slice() != image.shape() => {
                return Err(CoreError::Data(format!("{} is {:?}, expected {:?}", row.filename, image.shape(), s)))
            }
            _ => {}
        }
        if row.label > 1 {
            return Err(CoreError::Data(format!("label {} for {}", row.label, row.filename)));
        }
        let attributes = match (row.attr_binary, row.attr_scalar) {
            (Some(b), Some(s)) => Some(Attributes {
                attr_binary: b,
                attr_scalar: s,
            }),
            _ => None,
        };
        out.push(LabeledImage {
            image,
            label: row.label,
            attributes,
        });
    }
    Ok(out)
}

/// Write `img_00000.pgm`, ... plus `labels.csv` into `dir`. Returns the files written.
pub fn export_grayscale_dir(images: &[LabeledImage], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(CoreError::at(dir))?;
    let mut files = Vec::new();
    let csv_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for (i, img) in images.iter().enumerate() {
        let name = format!("img_{i:05}.pgm");
        let path = dir.join(&name);
        let mut buf = Vec::new();
        write_pgm(&mut buf, &img.image)?;
        fs::write(&path, buf).map_err(CoreError::at(&path))?;
        files.push(path);
        w.serialize(LabelRow {
            filename: name,
            label: img.label,
            attr_binary: img.attributes.map(|a| a.attr_binary),
            attr_scalar: img.attributes.map(|a| a.attr_scalar),
        })?;
    }
    w.flush()?;
    files.push(csv_path);
    Ok(files)
}

/// Stack images `[H, W]` into a `[N, 1, H, W]` batch with labels as f32.
pub fn to_batch(images: &[&LabeledImage]) -> Result<(Tensor, Vec<f32>)> {
    if images.is_empty() {
        return Err(CoreError::Data("empty batch".into()));
    }
    let s = images[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * s.iter().product::<usize>());
    for img in images {
        if img.image.shape() != s.as_slice() {
            return Err(CoreError::Shape(format!("image {:?} vs {:?}", img.image.shape(), s)));
        }
        data.extend_from_slice(img.image.data());
    }
    let batch = Tensor::new(vec![images.len(), 1, s[0], s[1]], data)?;
    Ok((batch, images.iter().map(|i| i.label as f32).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synthetic_is_reproducible_and_in_range() {
        let rng = RngStream::new(3, "data");
        let a = generate_synthetic(100, 16, 0.5, &rng).unwrap();
        let b = generate_synthetic(100, 16, 0.5, &rng).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|i| i.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert!(a.iter().all(|i| i.image.shape() == [16, 16]));
    }

    #[test]
    fn synthetic_class_balance() {
        let imgs = generate_synthetic(1000, 16, 0.5, &RngStream::new(11, "data")).unwrap();
        let mean = imgs.iter().map(|i| i.label as f64).sum::<f64>() / 1000.0;
        assert!((0.45..=0.55).contains(&mean), "{mean}");
    }

    #[test]
    fn synthetic_rejects_bad_args() {
        let r = RngStream::new(0, "d");
        assert!(generate_synthetic(0, 16, 0.5, &r).is_err());
        assert!(generate_synthetic(5, 16, 1.0, &r).is_err());
        assert!(generate_synthetic(5, 2, 0.5, &r).is_err());
    }

    #[test]
    fn split_rows() {
        let rows = [
            (500, (350, 75, 75)),
            (200, (140, 30, 30)),
            (100, (70, 15, 15)),
            (30, (10, 10, 10)),
            (10, (4, 3, 3)),
            (2, (2, 0, 0)),
            (1, (1, 0, 0)),
        ];
        for (n, want) in rows {
            assert_eq!(split_sizes(n), want, "n={n}");
        }
        let (tr, va, te) = split_client(&(0..10).collect::<Vec<_>>());
        assert_eq!((tr, va, te), ((0..4).collect(), vec![4, 5, 6], vec![7, 8, 9]));
    }

    proptest! {
        #[test]
        fn split_sizes_sum_and_regimes(n in 1usize..2000) {
            let (a, b, c) = split_sizes(n);
            prop_assert_eq!(a + b + c, n);
            if n < 10 {
                prop_assert_eq!((b, c), (0, 0));
            } else if n < 50 {
                prop_assert!(a >= b && b == c && a - b <= 2);
            } else {
                prop_assert_eq!(a, n * 7 / 10);
                prop_assert_eq!(b, n * 15 / 100);
            }
        }

        #[test]
        fn pgm_roundtrip_at_8_bits(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
            let mut r = RngStream::new(seed, "pgm");
            let t = Tensor::new(vec![h, w], (0..h * w).map(|_| r.uniform() as f32).collect()).unwrap();
            let mut first = Vec::new();
            write_pgm(&mut first, &t).unwrap();
            let back = read_pgm(&first).unwrap();
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert_eq!(quantize(*a), quantize(*b));
            }
            let mut second = Vec::new();
            write_pgm(&mut second, &back).unwrap();
            prop_assert_eq!(first, second);
        }
    }

    #[test]
    fn pgm_extremes_and_errors() {
        let black = read_pgm(b"P5\n2 1\n255\n\x00\x00").unwrap();
        assert_eq!(black.data(), &[0.0, 0.0]);
        let white = read_pgm(b"P5 # c\n1 1\n255\n\xff").unwrap();
        assert_eq!(white.data(), &[1.0]);
        assert!(read_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(read_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(read_pgm(b"P5\n1 1\n").is_err());
    }

    #[test]
    fn schedule_totals() {
        let small = ClientSchedule::small_source();
        assert_eq!((small.num_clients(), small.total_images()), (14, 1686));
        let tiny = ClientSchedule::tiny_source();
        assert_eq!((tiny.num_clients(), tiny.total_images()), (17, 125));
        assert_eq!(ClientSchedule::full().num_clients(), 36);
        assert_eq!(ClientSchedule::desk12().num_clients(), 12);
    }

    #[test]
    fn partition_is_disjoint_and_deterministic() {
        let sched = ClientSchedule::small_source();
        let rng = RngStream::new(5, "p");
        let parts = partition(2000, &sched, &rng).unwrap();
        assert_eq!(parts, partition(2000, &sched, &rng).unwrap());
        let mut all: Vec<usize> = parts.iter().flat_map(|p| p.train.iter().chain(&p.val).chain(&p.test).copied()).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!((n, all.len()), (1686, 1686));
        assert_eq!(unassigned(2000, &parts).len(), 314);
        for p in &parts {
            assert_eq!((p.train.len(), p.val.len(), p.test.len()), split_sizes(p.len()));
        }
        assert!(partition(100, &sched, &rng).is_err());
    }

    #[test]
    fn single_client_partition_matches_split() {
        let sched = ClientSchedule {
            groups: vec![ScheduleGroup {
                count: 1,
                size: 40,
                source: SourceTag::BSmall1,
            }],
        };
        let rng = RngStream::new(1, "p");
        let parts = partition(40, &sched, &rng).unwrap();
        let order = rng.child("partition").permutation(40);
        let (tr, va, te) = split_client(&order);
        assert_eq!((&parts[0].train, &parts[0].val, &parts[0].test), (&tr, &va, &te));
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_synthetic(4, 8, 0.5, &RngStream::new(2, "d")).unwrap();
        export_grayscale_dir(&imgs, dir.path()).unwrap();
        let back = import_grayscale_dir(dir.path(), &dir.path().join("labels.csv")).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in imgs.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.attributes, b.attributes);
            assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| quantize(*x) == quantize(*y)));
        }
    }

    #[test]
    fn import_rejects_unknown_file_and_records_missing_attrs() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.pgm"), b"P5\n1 1\n255\n\x80").unwrap();
        let csv = dir.path().join("l.csv");
        fs::write(&csv, "filename,label\na.pgm,1\n").unwrap();
        let imgs = import_grayscale_dir(dir.path(), &csv).unwrap();
        assert_eq!(imgs[0].attributes, None);
        fs::write(&csv, "filename,label\nb.pgm,1\n").unwrap();
        assert!(import_grayscale_dir(dir.path(), &csv).is_err());
    }
}
