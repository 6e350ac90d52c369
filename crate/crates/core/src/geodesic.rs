//! Marker-driven geodesic distance map. User-placed markers are the sources
//! of a shortest-path problem on the pixel grid whose traversal cost grows
//! with the template's squared gradient magnitude, so the normalized distance
//! is small inside the marked object and rises sharply across edges.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::image::{gradient, Image2D};

/// User-marked seed pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSet {
    points: Vec<(usize, usize)>,
}

impl MarkerSet {
    pub fn new(points: Vec<(usize, usize)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyMarkers);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        for &(x, y) in &self.points {
            if x >= width || y >= height {
                return Err(Error::MarkerOutOfBounds {
                    x: x as i64,
                    y: y as i64,
                    w: width,
                    h: height,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodesicConfig {
    /// Edge-sensitivity weight multiplying the squared gradient magnitude.
    pub beta_g: f64,
    pub connectivity: Connectivity,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        Self {
            beta_g: 1000.0,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Traversal cost `1 + beta_g * |grad T|^2`.
pub fn edge_cost(template: &Image2D, beta_g: f64) -> Image2D {
    let (gx, gy) = gradient(template);
    Image2D::from_fn(template.width(), template.height(), |x, y| {
        let (dx, dy) = (gx.get(x, y), gy.get(x, y));
        1.0 + beta_g * (dx * dx + dy * dy)
    })
}

struct HeapEntry {
    dist: f64,
    idx: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.idx == other.idx
    }
}
impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on finite distances; tie-break on index for determinism.
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap()
            .then_with(|| other.idx.cmp(&self.idx))
    }
}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn neighbor_offsets(connectivity: Connectivity) -> Vec<(i64, i64, f64)> {
    let mut offs = vec![
        (1, 0, 1.0),
        (-1, 0, 1.0),
        (0, 1, 1.0),
        (0, -1, 1.0),
    ];
    if connectivity == Connectivity::Eight {
        let d = std::f64::consts::SQRT_2;
        offs.extend([(1, 1, d), (1, -1, d), (-1, 1, d), (-1, -1, d)]);
    }
    offs
}

/// Unnormalized geodesic distance from the nearest marker, by Dijkstra on the
/// pixel grid. The weight of the step between neighbors p and q is
/// `0.5 * (cost(p) + cost(q)) * |p - q|`.
pub fn geodesic_distance(
    template: &Image2D,
    markers: &MarkerSet,
    cfg: &GeodesicConfig,
) -> Result<Image2D> {
    markers.validate_for(template.width(), template.height())?;
    let cost = edge_cost(template, cfg.beta_g);
    dijkstra(&cost, markers, cfg.connectivity)
}

/// Dijkstra over an explicit cost map; exposed separately so oracles can run
/// on arbitrary costs.
pub fn dijkstra(
    cost: &Image2D,
    markers: &MarkerSet,
    connectivity: Connectivity,
) -> Result<Image2D> {
    let (w, h) = (cost.width(), cost.height());
    markers.validate_for(w, h)?;
    let offs = neighbor_offsets(connectivity);
    let mut dist = vec![f64::INFINITY; w * h];
    let mut heap = BinaryHeap::new();
    for &(x, y) in markers.points() {
        let idx = y * w + x;
        if dist[idx] > 0.0 {
            dist[idx] = 0.0;
            heap.push(HeapEntry { dist: 0.0, idx });
        }
    }
    while let Some(HeapEntry { dist: d, idx }) = heap.pop() {
        if d > dist[idx] {
            continue;
        }
        let (x, y) = ((idx % w) as i64, (idx / w) as i64);
        for &(dx, dy, len) in &offs {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let nidx = ny as usize * w + nx as usize;
            let weight = 0.5
                * (cost.as_slice()[idx] + cost.as_slice()[nidx])
                * len;
            let nd = d + weight;
            if nd < dist[nidx] {
                dist[nidx] = nd;
                heap.push(HeapEntry { dist: nd, idx: nidx });
            }
        }
    }
    Image2D::from_vec(w, h, dist)
}

/// Scale so the farthest pixel sits at 1. An all-zero map (markers cover the
/// image) stays all zero.
pub fn normalize_distance(d0: &Image2D) -> Image2D {
    let max = d0.max();
    if max <= 0.0 {
        return Image2D::zeros(d0.width(), d0.height());
    }
    d0.map(|v| v / max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bellman_ford(cost: &Image2D, markers: &MarkerSet, connectivity: Connectivity) -> Vec<f64> {
        let (w, h) = (cost.width(), cost.height());
        let offs = neighbor_offsets(connectivity);
        let mut dist = vec![f64::INFINITY; w * h];
        for &(x, y) in markers.points() {
            dist[y * w + x] = 0.0;
        }
        loop {
            let mut changed = false;
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let idx = y as usize * w + x as usize;
                    for &(dx, dy, len) in &offs {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let nidx = ny as usize * w + nx as usize;
                        let weight =
                            0.5 * (cost.as_slice()[idx] + cost.as_slice()[nidx]) * len;
                        if dist[idx] + weight < dist[nidx] {
                            dist[nidx] = dist[idx] + weight;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                return dist;
            }
        }
    }

    #[test]
    fn edge_cost_constant_template() {
        let img = Image2D::constant(8, 8, 0.5);
        let cost = edge_cost(&img, 1000.0);
        assert!(cost.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn edge_cost_zero_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let img = Image2D::from_fn(8, 8, |_, _| rng.random_range(0.0..1.0));
        let cost = edge_cost(&img, 0.0);
        assert!(cost.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn edge_cost_spikes_at_step_edge() {
        let img = Image2D::from_fn(16, 8, |x, _| if x < 8 { 0.0 } else { 1.0 });
        let cost = edge_cost(&img, 1000.0);
        let at_edge = cost.get(8, 4);
        let flat = cost.get(2, 4);
        assert!(at_edge / flat > 100.0, "ratio {}", at_edge / flat);
    }

    #[test]
    fn uniform_cost_four_connectivity_is_manhattan() {
        let img = Image2D::constant(9, 9, 0.3);
        let markers = MarkerSet::new(vec![(4, 4)]).unwrap();
        let cfg = GeodesicConfig {
            beta_g: 1000.0,
            connectivity: Connectivity::Four,
        };
        let d0 = geodesic_distance(&img, &markers, &cfg).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let manhattan = (x as i64 - 4).unsigned_abs() + (y as i64 - 4).unsigned_abs();
                assert_eq!(d0.get(x, y), manhattan as f64, "at ({x}, {y})");
            }
        }
    }

    #[test]
    fn markers_everywhere_give_zero_map() {
        let img = Image2D::constant(5, 4, 0.2);
        let all: Vec<(usize, usize)> = (0..4)
            .flat_map(|y| (0..5).map(move |x| (x, y)))
            .collect();
        let markers = MarkerSet::new(all).unwrap();
        let d0 = geodesic_distance(&img, &markers, &GeodesicConfig::default()).unwrap();
        assert!(d0.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dijkstra_matches_bellman_ford_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for case in 0..20 {
            let img = Image2D::from_fn(12, 12, |_, _| rng.random_range(0.0..1.0));
            let markers = MarkerSet::new(vec![(
                rng.random_range(0..12),
                rng.random_range(0..12),
            )])
            .unwrap();
            for connectivity in [Connectivity::Four, Connectivity::Eight] {
                let cost = edge_cost(&img, 50.0);
                let fast = dijkstra(&cost, &markers, connectivity).unwrap();
                let slow = bellman_ford(&cost, &markers, connectivity);
                for (i, (&a, &b)) in fast.as_slice().iter().zip(&slow).enumerate() {
                    assert_eq!(a, b, "case {case}, pixel {i}");
                }
            }
        }
    }

    #[test]
    fn chamfer_metric_on_uniform_cost() {
        let img = Image2D::constant(11, 11, 0.7);
        let markers = MarkerSet::new(vec![(5, 5)]).unwrap();
        let d0 = geodesic_distance(&img, &markers, &GeodesicConfig::default()).unwrap();
        for y in 0..11i64 {
            for x in 0..11i64 {
                let (ax, ay) = ((x - 5).abs() as f64, (y - 5).abs() as f64);
                let (lo, hi) = (ax.min(ay), ax.max(ay));
                let chamfer = lo * std::f64::consts::SQRT_2 + (hi - lo);
                let got = d0.get(x as usize, y as usize);
                assert!((got - chamfer).abs() < 1e-9, "({x}, {y}): {got} vs {chamfer}");
            }
        }
    }

    #[test]
    fn beta_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let img = Image2D::from_fn(10, 10, |_, _| rng.random_range(0.0..1.0));
        let markers = MarkerSet::new(vec![(2, 7)]).unwrap();
        let lo = geodesic_distance(
            &img,
            &markers,
            &GeodesicConfig {
                beta_g: 10.0,
                ..Default::default()
            },
        )
        .unwrap();
        let hi = geodesic_distance(
            &img,
            &markers,
            &GeodesicConfig {
                beta_g: 100.0,
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in lo.as_slice().iter().zip(hi.as_slice()) {
            assert!(b >= a);
        }
    }

    #[test]
    fn normalize_caps_at_one_and_keeps_argmax() {
        let mut d0 = Image2D::zeros(4, 4);
        d0.set(1, 2, 7.5);
        d0.set(3, 3, 3.0);
        let d = normalize_distance(&d0);
        assert_eq!(d.get(1, 2), 1.0);
        assert_eq!(d.max(), 1.0);
        assert_eq!(d.get(3, 3), 3.0 / 7.5);
        assert!(d.min() >= 0.0);
    }

    #[test]
    fn normalize_zero_map_stays_zero() {
        let d0 = Image2D::zeros(6, 3);
        let d = normalize_distance(&d0);
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn markers_are_at_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let img = Image2D::from_fn(10, 10, |_, _| rng.random_range(0.0..1.0));
        let markers = MarkerSet::new(vec![(1, 1), (8, 3), (4, 9)]).unwrap();
        let d0 = geodesic_distance(&img, &markers, &GeodesicConfig::default()).unwrap();
        for &(x, y) in markers.points() {
            assert_eq!(d0.get(x, y), 0.0);
        }
        let d = normalize_distance(&d0);
        assert!(d.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.max(), 1.0);
    }

    #[test]
    fn empty_marker_set_is_rejected() {
        assert!(MarkerSet::new(vec![]).is_err());
    }

    #[test]
    fn out_of_bounds_marker_is_rejected() {
        let img = Image2D::zeros(4, 4);
        let markers = MarkerSet::new(vec![(4, 0)]).unwrap();
        assert!(geodesic_distance(&img, &markers, &GeodesicConfig::default()).is_err());
    }
}
