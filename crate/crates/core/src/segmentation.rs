//! Snapshot extraction: map differencing, a neighbour-count low-pass filter,
//! and 8-connected flood fill.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, OccupancyGrid};
use crate::io::{read_pgm, write_pgm, PgmFormat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationParams {
    pub occ_thresh: f64,
    pub free_thresh: f64,
    pub min_neighbors: u8,
    pub min_area: usize,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            occ_thresh: 0.75,
            free_thresh: 0.25,
            min_neighbors: 2,
            min_area: 4,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.free_thresh && self.free_thresh < self.occ_thresh && self.occ_thresh <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 <= free_thresh < occ_thresh <= 1, got free {} occ {}",
                self.free_thresh, self.occ_thresh
            )));
        }
        if self.min_neighbors > 8 {
            return Err(Error::InvalidParameter(format!(
                "min_neighbors must be in 0..=8, got {}",
                self.min_neighbors
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(Error::InvalidGrid(format!(
                "mask needs {} cells, got {}",
                dims.len(),
                bits.len()
            )));
        }
        Ok(BinaryMask { dims, bits })
    }

    pub fn empty(dims: Dims) -> Self {
        BinaryMask {
            dims,
            bits: vec![false; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.dims.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.dims.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn neighbors(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (w, h) = (self.dims.width as i64, self.dims.height as i64);
        (-1i64..=1)
            .flat_map(|dy| (-1i64..=1).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx != 0 || dy != 0)
            .filter_map(move |(dx, dy)| {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                (nx >= 0 && ny >= 0 && nx < w && ny < h).then_some((nx as usize, ny as usize))
            })
    }
}

/// One extracted object snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub grid: OccupancyGrid,
    pub epoch: usize,
    pub index: usize,
    /// Map cell of the crop's top-left corner.
    pub origin: (usize, usize),
}

/// Snapshots grouped by epoch, optionally with the maps they came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    maps: Vec<OccupancyGrid>,
    epochs: Vec<Vec<Snapshot>>,
}

impl Dataset {
    /// Validates that epochs are in range and per-epoch indices are contiguous.
    pub fn new(maps: Vec<OccupancyGrid>, epochs: Vec<Vec<Snapshot>>) -> Result<Self> {
        if !maps.is_empty() && maps.len() != epochs.len() {
            return Err(Error::InvalidParameter(format!(
                "{} maps but {} epochs of snapshots",
                maps.len(),
                epochs.len()
            )));
        }
        for (t, snaps) in epochs.iter().enumerate() {
            for (k, s) in snaps.iter().enumerate() {
                if s.epoch != t || s.index != k {
                    return Err(Error::InvalidParameter(format!(
                        "snapshot at epoch slot {t}, position {k} is labelled ({}, {})",
                        s.epoch, s.index
                    )));
                }
            }
        }
        Ok(Dataset { maps, epochs })
    }

    /// Builds a dataset from per-epoch grids, assigning epochs, indices, and zero origins.
    pub fn from_grids(epochs: Vec<Vec<OccupancyGrid>>) -> Self {
        let epochs = epochs
            .into_iter()
            .enumerate()
            .map(|(t, grids)| {
                grids
                    .into_iter()
                    .enumerate()
                    .map(|(k, grid)| Snapshot {
                        grid,
                        epoch: t,
                        index: k,
                        origin: (0, 0),
                    })
                    .collect()
            })
            .collect();
        Dataset {
            maps: Vec::new(),
            epochs,
        }
    }

    pub fn maps(&self) -> &[OccupancyGrid] {
        &self.maps
    }

    pub fn epochs(&self) -> &[Vec<Snapshot>] {
        &self.epochs
    }

    pub fn num_epochs(&self) -> usize {
        self.epochs.len()
    }

    /// `K_t` for every epoch.
    pub fn counts(&self) -> Vec<usize> {
        self.epochs.iter().map(Vec::len).collect()
    }

    pub fn total_snapshots(&self) -> usize {
        self.epochs.iter().map(Vec::len).sum()
    }

    pub fn max_count(&self) -> usize {
        self.epochs.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &Snapshot> {
        self.epochs.iter().flatten()
    }

    /// Drops one epoch and renumbers the rest (leave-one-out training sets).
    pub fn without_epoch(&self, held_out: usize) -> Dataset {
        let mut epochs = Vec::with_capacity(self.epochs.len().saturating_sub(1));
        let mut maps = Vec::new();
        for (t, snaps) in self.epochs.iter().enumerate() {
            if t == held_out {
                continue;
            }
            let new_t = epochs.len();
            epochs.push(
                snaps
                    .iter()
                    .map(|s| Snapshot {
                        epoch: new_t,
                        ..s.clone()
                    })
                    .collect(),
            );
            if let Some(m) = self.maps.get(t) {
                maps.push(m.clone());
            }
        }
        Dataset { maps, epochs }
    }

    /// A single-epoch dataset holding only epoch `t`.
    pub fn only_epoch(&self, t: usize) -> Dataset {
        let snaps = self.epochs[t]
            .iter()
            .map(|s| Snapshot { epoch: 0, ..s.clone() })
            .collect();
        Dataset {
            maps: self.maps.get(t).cloned().into_iter().collect(),
            epochs: vec![snaps],
        }
    }

    /// Writes `snap_t<t>_k<k>.pgm` files and a `dataset.json` index.
    pub fn save(&self, dir: &Path, params: &SegmentationParams) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for s in self.snapshots() {
            let file = format!("snap_t{}_k{}.pgm", s.epoch, s.index);
            write_pgm(&dir.join(&file), &s.grid, PgmFormat::Binary)?;
            entries.push(SnapshotEntry {
                epoch: s.epoch,
                index: s.index,
                origin: [s.origin.0, s.origin.1],
                width: s.grid.width(),
                height: s.grid.height(),
                file,
            });
        }
        let index = DatasetIndex {
            epochs: self.num_epochs(),
            counts: self.counts(),
            params: *params,
            snapshots: entries,
        };
        let path = dir.join("dataset.json");
        let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads a dataset written by [`Dataset::save`]. Maps are not restored.
    pub fn load(dir: &Path) -> Result<(Dataset, SegmentationParams)> {
        let path = dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mut epochs: Vec<Vec<Snapshot>> = vec![Vec::new(); index.epochs];
        let mut entries = index.snapshots;
        entries.sort_by_key(|e| (e.epoch, e.index));
        for e in entries {
            let grid = read_pgm(&dir.join(&e.file))?;
            let slot = epochs.get_mut(e.epoch).ok_or_else(|| {
                Error::InvalidParameter(format!("snapshot epoch {} >= {}", e.epoch, index.epochs))
            })?;
            slot.push(Snapshot {
                grid,
                epoch: e.epoch,
                index: e.index,
                origin: (e.origin[0], e.origin[1]),
            });
        }
        Ok((Dataset::new(Vec::new(), epochs)?, index.params))
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    epoch: usize,
    index: usize,
    origin: [usize; 2],
    width: usize,
    height: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    epochs: usize,
    counts: Vec<usize>,
    params: SegmentationParams,
    snapshots: Vec<SnapshotEntry>,
}

fn check_same_dims(maps: &[OccupancyGrid]) -> Result<Dims> {
    let d = maps
        .first()
        .map(OccupancyGrid::dims)
        .ok_or(Error::TooFewEpochs { needed: 1, got: 0 })?;
    for m in maps {
        if m.dims() != d {
            return Err(Error::DimensionMismatch {
                left: (d.width, d.height),
                right: (m.width(), m.height()),
            });
        }
    }
    Ok(d)
}

/// Cells occupied at `epoch` that are known free in at least one other epoch.
pub fn difference_mask(
    maps: &[OccupancyGrid],
    epoch: usize,
    occ_thresh: f64,
    free_thresh: f64,
) -> Result<BinaryMask> {
    let dims = check_same_dims(maps)?;
    if epoch >= maps.len() {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} out of range for {} maps",
            maps.len()
        )));
    }
    let current = &maps[epoch];
    let bits = (0..dims.len())
        .map(|j| {
            current.known_value(j).is_some_and(|v| v >= occ_thresh)
                && maps.iter().enumerate().any(|(t, m)| {
                    t != epoch && m.known_value(j).is_some_and(|v| v <= free_thresh)
                })
        })
        .collect();
    Ok(BinaryMask { dims, bits })
}

/// Keeps a set cell iff at least `min_neighbors` of its 8 neighbours are set.
/// Applied once, against the unfiltered input.
pub fn lowpass_filter(mask: &BinaryMask, min_neighbors: u8) -> BinaryMask {
    let mut out = BinaryMask::empty(mask.dims);
    for y in 0..mask.dims.height {
        for x in 0..mask.dims.width {
            if mask.get(x, y) {
                let n = mask.neighbors(x, y).filter(|&(nx, ny)| mask.get(nx, ny)).count();
                out.set(x, y, n >= min_neighbors as usize);
            }
        }
    }
    out
}

/// 8-connected components in raster order of their first (top-left) cell.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let w = mask.dims.width;
    let mut seen = vec![false; mask.bits.len()];
    let mut components = Vec::new();
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![(start % w, start / w)];
        let mut cells = Vec::new();
        while let Some((x, y)) = stack.pop() {
            cells.push((x, y));
            for (nx, ny) in mask.neighbors(x, y) {
                let i = ny * w + nx;
                if mask.bits[i] && !seen[i] {
                    seen[i] = true;
                    stack.push((nx, ny));
                }
            }
        }
        cells.sort_by_key(|&(x, y)| (y, x));
        components.push(cells);
    }
    components
}

/// Crops a component out of `map`: bounding box plus a one-cell border.
/// Component cells and known-free cells keep their map values; everything
/// else (static structure, other objects, unknown map cells) is masked.
fn crop_component(
    map: &OccupancyGrid,
    cells: &[(usize, usize)],
    free_thresh: f64,
) -> (OccupancyGrid, (usize, usize)) {
    let x0 = cells.iter().map(|c| c.0).min().unwrap().saturating_sub(1);
    let y0 = cells.iter().map(|c| c.1).min().unwrap().saturating_sub(1);
    let x1 = (cells.iter().map(|c| c.0).max().unwrap() + 1).min(map.width() - 1);
    let y1 = (cells.iter().map(|c| c.1).max().unwrap() + 1).min(map.height() - 1);
    let dims = Dims::new(x1 - x0 + 1, y1 - y0 + 1);
    let mut in_component = vec![false; dims.len()];
    for &(x, y) in cells {
        in_component[(y - y0) * dims.width + (x - x0)] = true;
    }
    let mut values = vec![0.0; dims.len()];
    let mut unknown = vec![true; dims.len()];
    for cy in 0..dims.height {
        for cx in 0..dims.width {
            let i = cy * dims.width + cx;
            let j = map.index(cx + x0, cy + y0);
            if let Some(v) = map.known_value(j) {
                if in_component[i] || v <= free_thresh {
                    values[i] = v;
                    unknown[i] = false;
                }
            }
        }
    }
    let mut grid = OccupancyGrid::with_resolution(dims, values, map.resolution())
        .expect("map values are in range")
        .with_unknown(unknown)
        .expect("mask length matches");
    grid.set_resolution(map.resolution());
    (grid, (x0, y0))
}

/// Runs differencing, filtering, and flood fill on every epoch.
pub fn extract_snapshots(maps: &[OccupancyGrid], params: &SegmentationParams) -> Result<Dataset> {
    params.validate()?;
    if maps.len() < 2 {
        return Err(Error::TooFewEpochs {
            needed: 2,
            got: maps.len(),
        });
    }
    check_same_dims(maps)?;
    let mut epochs = Vec::with_capacity(maps.len());
    for (t, map) in maps.iter().enumerate() {
        let mask = difference_mask(maps, t, params.occ_thresh, params.free_thresh)?;
        let filtered = lowpass_filter(&mask, params.min_neighbors);
        let mut snaps = Vec::new();
        for cells in connected_components(&filtered) {
            if cells.len() < params.min_area {
                continue;
            }
            let (grid, origin) = crop_component(map, &cells, params.free_thresh);
            snaps.push(Snapshot {
                grid,
                epoch: t,
                index: snaps.len(),
                origin,
            });
        }
        epochs.push(snaps);
    }
    Dataset::new(maps.to_vec(), epochs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_with(dims: Dims, occupied: &[(usize, usize)]) -> OccupancyGrid {
        let mut m = OccupancyGrid::filled(dims, 0.0);
        for &(x, y) in occupied {
            m.set(x, y, 1.0);
        }
        m
    }

    fn block(x0: usize, y0: usize, w: usize, h: usize) -> Vec<(usize, usize)> {
        (y0..y0 + h).flat_map(|y| (x0..x0 + w).map(move |x| (x, y))).collect()
    }

    #[test]
    fn identical_maps_give_empty_mask() {
        let m = map_with(Dims::square(6), &block(1, 1, 2, 2));
        let maps = vec![m.clone(), m.clone(), m];
        for t in 0..3 {
            assert_eq!(difference_mask(&maps, t, 0.75, 0.25).unwrap().count(), 0);
        }
    }

    #[test]
    fn single_moved_cell_is_detected() {
        let d = Dims::square(5);
        let maps = vec![map_with(d, &[(2, 3)]), map_with(d, &[]), map_with(d, &[])];
        let mask = difference_mask(&maps, 0, 0.75, 0.25).unwrap();
        assert_eq!(mask.count(), 1);
        assert!(mask.get(2, 3));
        assert_eq!(difference_mask(&maps, 1, 0.75, 0.25).unwrap().count(), 0);
    }

    #[test]
    fn unknown_reference_cells_are_not_free_evidence() {
        let d = Dims::new(2, 1);
        let a = map_with(d, &[(0, 0)]);
        let b = OccupancyGrid::filled(d, 0.0).with_unknown(vec![true, false]).unwrap();
        assert_eq!(difference_mask(&[a, b], 0, 0.75, 0.25).unwrap().count(), 0);
    }

    #[test]
    fn mismatched_maps_are_rejected() {
        let maps = vec![OccupancyGrid::filled(Dims::square(3), 0.0), OccupancyGrid::filled(Dims::square(4), 0.0)];
        assert!(matches!(
            difference_mask(&maps, 0, 0.75, 0.25),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lowpass_cases() {
        let d = Dims::square(7);
        let mut iso = BinaryMask::empty(d);
        iso.set(3, 3, true);
        assert_eq!(lowpass_filter(&iso, 0), iso);
        assert_eq!(lowpass_filter(&iso, 1).count(), 0);

        let mut solid = BinaryMask::empty(d);
        for (x, y) in block(2, 2, 3, 3) {
            solid.set(x, y, true);
        }
        // hand count: corners have 3 set neighbours, edges 5, centre 8
        let counts: Vec<usize> = block(2, 2, 3, 3)
            .into_iter()
            .map(|(x, y)| solid.neighbors(x, y).filter(|&(a, b)| solid.get(a, b)).count())
            .collect();
        assert_eq!(counts, vec![3, 5, 3, 5, 8, 5, 3, 5, 3]);
        assert_eq!(lowpass_filter(&solid, 2), solid);
        assert_eq!(lowpass_filter(&solid, 4).count(), 5);
    }

    #[test]
    fn components_are_ordered_and_diagonal_connected() {
        let d = Dims::square(8);
        let mut m = BinaryMask::empty(d);
        for (x, y) in [(5, 1), (6, 2), (1, 4), (2, 4)] {
            m.set(x, y, true);
        }
        let comps = connected_components(&m);
        assert_eq!(comps, vec![vec![(5, 1), (6, 2)], vec![(1, 4), (2, 4)]]);
    }

    #[test]
    fn objects_one_cell_apart_separate() {
        let d = Dims::new(12, 8);
        let mut objects = block(1, 1, 3, 3);
        objects.extend(block(5, 1, 3, 3));
        let maps = vec![map_with(d, &objects), map_with(d, &[])];
        let ds = extract_snapshots(&maps, &SegmentationParams::default()).unwrap();
        assert_eq!(ds.counts(), vec![2, 0]);
        let s = &ds.epochs()[0][0];
        assert_eq!(s.origin, (0, 0));
        assert_eq!(s.grid.dims(), Dims::square(5));
        // component plus the free border are known; the border value is 0
        assert_eq!(s.grid.known_count(), 25);
        assert_eq!(s.grid.value(2, 2), 1.0);
        assert_eq!(s.grid.value(0, 0), 0.0);
    }

    #[test]
    fn static_structure_is_masked_in_crops() {
        let d = Dims::new(8, 6);
        let mut wall = block(0, 0, 8, 1);
        let obj = block(2, 1, 2, 2);
        let mut with_obj = wall.clone();
        with_obj.extend(obj.iter().copied());
        wall.extend(block(6, 4, 1, 1));
        let maps = vec![map_with(d, &with_obj), map_with(d, &wall)];
        let ds = extract_snapshots(&maps, &SegmentationParams::default()).unwrap();
        let s = &ds.epochs()[0][0];
        assert_eq!(s.origin, (1, 0));
        // the top border row is wall: occupied but static, so unknown
        for x in 0..s.grid.width() {
            assert!(!s.grid.is_known(s.grid.index(x, 0)));
        }
    }

    #[test]
    fn static_world_has_no_snapshots() {
        let m = map_with(Dims::square(6), &block(0, 0, 6, 1));
        let ds = extract_snapshots(&[m.clone(), m], &SegmentationParams::default()).unwrap();
        assert_eq!(ds.counts(), vec![0, 0]);
    }

    #[test]
    fn needs_two_epochs() {
        let m = OccupancyGrid::filled(Dims::square(3), 0.0);
        assert!(matches!(
            extract_snapshots(&[m], &SegmentationParams::default()),
            Err(Error::TooFewEpochs { got: 1, .. })
        ));
    }

    #[test]
    fn small_components_are_dropped() {
        let d = Dims::square(8);
        let maps = vec![map_with(d, &block(1, 1, 2, 1)), map_with(d, &[])];
        let params = SegmentationParams {
            min_neighbors: 0,
            ..Default::default()
        };
        assert_eq!(extract_snapshots(&maps, &params).unwrap().counts(), vec![0, 0]);
    }

    #[test]
    fn save_load_round_trip() {
        let d = Dims::new(12, 8);
        let maps = vec![map_with(d, &block(1, 1, 3, 3)), map_with(d, &block(6, 3, 3, 2))];
        let params = SegmentationParams::default();
        let ds = extract_snapshots(&maps, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), &params).unwrap();
        assert!(dir.path().join("snap_t1_k0.pgm").exists());
        let (back, p) = Dataset::load(dir.path()).unwrap();
        assert_eq!(p, params);
        assert_eq!(back.epochs(), ds.epochs());
    }

    #[test]
    fn leave_one_out_renumbers() {
        let g = OccupancyGrid::filled(Dims::square(2), 1.0);
        let ds = Dataset::from_grids(vec![vec![g.clone()], vec![g.clone(), g.clone()], vec![g]]);
        let train = ds.without_epoch(1);
        assert_eq!(train.counts(), vec![1, 1]);
        assert_eq!(train.epochs()[1][0].epoch, 1);
        assert_eq!(ds.only_epoch(1).counts(), vec![2]);
    }
}
