//! Raster primitives: masked task layers, multi-channel volumes, masked
//! reductions and the `grd1` interchange format.

use std::borrow::Borrow;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One task layer at one timestamp: a row-major scalar field plus a
/// validity mask (`true` = valid observation).
#[derive(Debug, Clone)]
pub struct LayerGrid {
    width: usize,
    height: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl LayerGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let cells = width * height;
        if width == 0 || height == 0 {
            return Err(Error::structural("grid dimensions must be non-zero"));
        }
        if values.len() != cells || mask.len() != cells {
            return Err(Error::structural(format!(
                "grid {width}x{height} needs {cells} cells, got {} values and {} mask entries",
                values.len(),
                mask.len()
            )));
        }
        if let Some(i) = (0..cells).find(|&i| mask[i] && !values[i].is_finite()) {
            return Err(Error::structural(format!("valid cell {i} holds a non-finite value")));
        }
        Ok(Self {
            width,
            height,
            values,
            mask,
        })
    }

    /// All-valid grid.
    pub fn dense(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let n = width * height;
        Self::new(width, height, values, vec![true; n])
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            values: vec![value; n],
            mask: vec![true; n],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            mask: vec![true; values.len()],
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_dims(&self, other: &LayerGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    /// Value of cell `i` if it is valid.
    pub fn get(&self, i: usize) -> Option<f64> {
        self.mask[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.mask)
            .filter_map(|(&v, &m)| m.then_some(v))
    }

    pub fn valid_mean(&self) -> Option<f64> {
        let n = self.valid_count();
        (n > 0).then(|| self.valid_values().sum::<f64>() / n as f64)
    }

    /// Population variance over valid cells.
    pub fn valid_variance(&self) -> Option<f64> {
        let mean = self.valid_mean()?;
        let n = self.valid_count() as f64;
        Some(self.valid_values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
    }

    /// Copy with every cell marked valid. Invalid cells get `fill`.
    pub fn densified(&self, fill: f64) -> LayerGrid {
        let values = self
            .values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { v } else { fill })
            .collect();
        LayerGrid {
            width: self.width,
            height: self.height,
            values,
            mask: vec![true; self.len()],
        }
    }

    pub fn with_mask(&self, mask: Vec<bool>) -> Result<LayerGrid> {
        LayerGrid::new(self.width, self.height, self.values.clone(), mask)
    }

    /// Clamp every valid value into `[0, 1]`.
    pub fn clamped_unit(mut self) -> LayerGrid {
        for (v, &m) in self.values.iter_mut().zip(&self.mask) {
            if m {
                *v = v.clamp(0.0, 1.0);
            }
        }
        self
    }

    /// Serialize as `grd1`: magic, LE u32 width/height, LE f32 cells with
    /// NaN for invalid cells.
    pub fn to_grd1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.len());
        out.extend_from_slice(GRD1_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for (&v, &m) in self.values.iter().zip(&self.mask) {
            let f = if m { v as f32 } else { f32::NAN };
            out.extend_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn from_grd1_bytes(bytes: &[u8], source: &str) -> Result<LayerGrid> {
        let fmt = |offset: usize, message: &str| Error::Format {
            path: source.to_string(),
            offset: offset as u64,
            message: message.to_string(),
        };
        if bytes.len() < 4 {
            return Err(fmt(bytes.len(), "truncated magic"));
        }
        if &bytes[..4] != GRD1_MAGIC {
            return Err(fmt(0, "bad magic, expected GRD1"));
        }
        if bytes.len() < 12 {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if width == 0 || height == 0 {
            return Err(fmt(4, "zero grid dimension"));
        }
        let cells = width
            .checked_mul(height)
            .ok_or_else(|| fmt(4, "grid dimensions overflow"))?;
        let expected = 12 + 4 * cells;
        if bytes.len() < expected {
            return Err(fmt(bytes.len(), &format!("truncated cell data, expected {expected} bytes")));
        }
        if bytes.len() > expected {
            return Err(fmt(expected, "trailing bytes after cell data"));
        }
        let mut values = Vec::with_capacity(cells);
        let mut mask = Vec::with_capacity(cells);
        for chunk in bytes[12..].chunks_exact(4) {
            let f = f32::from_le_bytes(chunk.try_into().unwrap());
            if f.is_nan() {
                values.push(f64::NAN);
                mask.push(false);
            } else if f.is_infinite() {
                let offset = 12 + 4 * values.len();
                return Err(fmt(offset, "infinite cell value"));
            } else {
                values.push(f as f64);
                mask.push(true);
            }
        }
        Ok(LayerGrid {
            width,
            height,
            values,
            mask,
        })
    }

    pub fn save_grd1(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_grd1_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_grd1(path: &Path) -> Result<LayerGrid> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        LayerGrid::from_grd1_bytes(&bytes, &path.display().to_string())
    }
}

const GRD1_MAGIC: &[u8; 4] = b"GRD1";

/// Two grids are equal when dimensions and masks match and every valid
/// cell holds the same bits. Invalid cells are ignored.
impl PartialEq for LayerGrid {
    fn eq(&self, other: &Self) -> bool {
        self.same_dims(other)
            && self.mask == other.mask
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.mask)
                .all(|((a, b), &m)| !m || a.to_bits() == b.to_bits())
    }
}

/// Ordered stack of layers sharing dimensions. Channel order is part of a
/// trained model's identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: Vec<LayerGrid>,
}

impl Volume {
    pub fn new(channels: Vec<LayerGrid>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::structural("volume needs at least one channel"))?;
        if let Some((i, _)) = channels.iter().enumerate().find(|(_, c)| !c.same_dims(first)) {
            return Err(Error::structural(format!(
                "channel {i} dimensions differ from channel 0 ({}x{})",
                first.width, first.height
            )));
        }
        Ok(Self { channels })
    }

    pub fn single(layer: LayerGrid) -> Self {
        Self {
            channels: vec![layer],
        }
    }

    pub fn channels(&self) -> &[LayerGrid] {
        &self.channels
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    /// Channel-major dense planes where each channel's invalid cells are
    /// replaced by that channel's valid mean (0 when nothing is valid).
    pub fn substituted_planes(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels.len() * self.channels[0].len());
        for c in &self.channels {
            let fill = c.valid_mean().unwrap_or(0.0);
            out.extend(
                c.values
                    .iter()
                    .zip(&c.mask)
                    .map(|(&v, &m)| if m { v } else { fill }),
            );
        }
        out
    }
}

/// Mean squared error over cells valid in `gt`.
pub fn masked_l2(pred: &LayerGrid, gt: &LayerGrid) -> Result<f64> {
    if !pred.same_dims(gt) {
        return Err(Error::structural(format!(
            "masked_l2 dimension mismatch: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..gt.len() {
        if gt.mask[i] {
            let d = pred.values[i] - gt.values[i];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("ground truth has no valid cells".into()));
    }
    Ok(sum / n as f64)
}

/// Per-cell median over the candidates valid at that cell. Even counts take
/// the mean of the two middle values; a cell is valid iff any candidate is.
pub fn pixelwise_median<G: Borrow<LayerGrid>>(candidates: &[G]) -> Result<LayerGrid> {
    let first = candidates
        .first()
        .ok_or_else(|| Error::structural("pixelwise_median needs at least one candidate"))?
        .borrow();
    if candidates.iter().any(|c| !c.borrow().same_dims(first)) {
        return Err(Error::structural("pixelwise_median candidates differ in dimensions"));
    }
    let cells = first.len();
    let mut values = vec![0.0; cells];
    let mut mask = vec![false; cells];
    let mut buf = Vec::with_capacity(candidates.len());
    for i in 0..cells {
        buf.clear();
        buf.extend(candidates.iter().filter_map(|c| c.borrow().get(i)));
        if buf.is_empty() {
            values[i] = f64::NAN;
            continue;
        }
        buf.sort_unstable_by(f64::total_cmp);
        let n = buf.len();
        values[i] = if n % 2 == 1 {
            buf[n / 2]
        } else {
            0.5 * (buf[n / 2 - 1] + buf[n / 2])
        };
        mask[i] = true;
    }
    Ok(LayerGrid {
        width: first.width,
        height: first.height,
        values,
        mask,
    })
}

/// Affine map of valid cells from `[lo, hi]` onto `[0, 1]`, clamping
/// out-of-range values. The mask is unchanged.
pub fn normalize_layer(raw: &LayerGrid, lo: f64, hi: f64) -> Result<LayerGrid> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Parameter(format!("normalization needs lo < hi, got [{lo}, {hi}]")));
    }
    let span = hi - lo;
    let values = raw
        .values
        .iter()
        .zip(&raw.mask)
        .map(|(&v, &m)| if m { ((v - lo) / span).clamp(0.0, 1.0) } else { v })
        .collect();
    Ok(LayerGrid {
        width: raw.width,
        height: raw.height,
        values,
        mask: raw.mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize, vals: &[f64], mask: &[bool]) -> LayerGrid {
        LayerGrid::new(w, h, vals.to_vec(), mask.to_vec()).unwrap()
    }

    #[test]
    fn masked_l2_identity_is_zero() {
        let g = grid(2, 2, &[0.1, 0.2, 0.3, 0.4], &[true, false, true, true]);
        assert_eq!(masked_l2(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn masked_l2_hand_value() {
        let gt = LayerGrid::dense(2, 1, vec![0.0, 0.0]).unwrap();
        let pred = LayerGrid::dense(2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(masked_l2(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn masked_l2_ignores_invalid_gt_cells() {
        let gt = grid(3, 1, &[0.0, 5.0, 0.0], &[true, false, true]);
        let pred = LayerGrid::dense(3, 1, vec![0.5, 0.0, 0.5]).unwrap();
        assert!((masked_l2(&pred, &gt).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn masked_l2_errors() {
        let a = LayerGrid::filled(2, 2, 0.0);
        let b = LayerGrid::filled(2, 3, 0.0);
        assert!(matches!(masked_l2(&a, &b), Err(Error::Structural(_))));
        let empty = grid(2, 1, &[0.0, 0.0], &[false, false]);
        let p = LayerGrid::filled(2, 1, 0.0);
        assert!(matches!(masked_l2(&p, &empty), Err(Error::UndefinedMetric(_))));
    }

    fn cell(values: &[f64], valid: &[bool]) -> f64 {
        let cands: Vec<LayerGrid> = values
            .iter()
            .zip(valid)
            .map(|(&v, &m)| grid(1, 1, &[v], &[m]))
            .collect();
        pixelwise_median(&cands).unwrap().values()[0]
    }

    #[test]
    fn median_odd_even_and_invalid() {
        assert_eq!(cell(&[0.9, 0.2, 0.5], &[true; 3]), 0.5);
        assert!((cell(&[0.2, 0.6], &[true; 2]) - 0.4).abs() < 1e-15);
        assert_eq!(cell(&[0.1, 42.0, 0.5, 0.3], &[true, false, true, true]), 0.3);
    }

    #[test]
    fn median_all_invalid_cell_is_invalid() {
        let a = grid(2, 1, &[0.1, 0.2], &[false, true]);
        let b = grid(2, 1, &[0.3, 0.4], &[false, true]);
        let m = pixelwise_median(&[a, b]).unwrap();
        assert_eq!(m.mask(), &[false, true]);
        assert!((m.values()[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn median_errors() {
        let none: Vec<LayerGrid> = vec![];
        assert!(pixelwise_median(&none).is_err());
        let a = LayerGrid::filled(2, 2, 0.0);
        let b = LayerGrid::filled(3, 2, 0.0);
        assert!(pixelwise_median(&[a, b]).is_err());
    }

    #[test]
    fn normalize_endpoints_and_clamp() {
        let raw = LayerGrid::dense(5, 1, vec![2.0, 6.0, 4.0, -10.0, 100.0]).unwrap();
        let n = normalize_layer(&raw, 2.0, 6.0).unwrap();
        assert_eq!(n.values(), &[0.0, 1.0, 0.5, 0.0, 1.0]);
        assert!(normalize_layer(&raw, 1.0, 1.0).is_err());
        assert!(normalize_layer(&raw, 3.0, 1.0).is_err());
    }

    #[test]
    fn normalize_keeps_mask() {
        let raw = grid(2, 1, &[3.0, f64::NAN], &[true, false]);
        let n = normalize_layer(&raw, 0.0, 4.0).unwrap();
        assert_eq!(n.mask(), raw.mask());
    }

    #[test]
    fn grd1_nan_cells_become_invalid() {
        let g = grid(3, 2, &[0.5, 0.0, 1.0, 0.25, 0.75, 0.125], &[true, false, true, true, false, true]);
        let bytes = g.to_grd1_bytes();
        assert_eq!(&bytes[..4], b"GRD1");
        assert_eq!(bytes.len(), 12 + 24);
        let back = LayerGrid::from_grd1_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.mask(), g.mask());
        assert_eq!(back, g);
        assert_eq!(back.to_grd1_bytes(), bytes);
    }

    #[test]
    fn grd1_format_errors_carry_offsets() {
        let g = LayerGrid::filled(2, 2, 0.5);
        let mut bytes = g.to_grd1_bytes();
        bytes[0] = b'X';
        match LayerGrid::from_grd1_bytes(&bytes, "bad") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
        let bytes = g.to_grd1_bytes();
        match LayerGrid::from_grd1_bytes(&bytes[..15], "short") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 15),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn volume_rejects_mismatched_channels() {
        let a = LayerGrid::filled(2, 2, 0.0);
        let b = LayerGrid::filled(2, 3, 0.0);
        assert!(Volume::new(vec![a, b]).is_err());
        assert!(Volume::new(vec![]).is_err());
    }

    #[test]
    fn substitution_uses_channel_valid_mean() {
        let a = grid(3, 1, &[0.2, 9.0, 0.4], &[true, false, true]);
        let v = Volume::single(a);
        let planes = v.substituted_planes();
        assert!((planes[1] - 0.3).abs() < 1e-15);
    }
}
