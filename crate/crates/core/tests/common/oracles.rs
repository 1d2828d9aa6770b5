//! Brute-force reference implementations checked against the library on
//! randomized instances. Each oracle is written independently of the code
//! it checks: exact integer arithmetic, union-find labeling, rasterized
//! areas and inequality forms of the binning rules.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wsdl::attention::{binarize, largest_component_bbox, otsu_threshold, AttentionMap, BBox, BinaryMask};
use wsdl::eval::{accuracy, confusion_matrix, localization_accuracy, pcl, top_confused, LOCALIZATION_IOU};
use wsdl::heads::roi_pool;
use wsdl::rpn::{iou, nms};
use wsdl::tensor::Tensor;

pub const INSTANCES: usize = 1000;
pub const IOU_TOLERANCE: f64 = 1e-9;

pub struct OracleOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub mismatches: usize,
    pub first: Option<String>,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

type Check = fn(&mut ChaCha8Rng) -> Result<(), String>;

pub const ORACLES: &[(&str, u64, Check)] = &[
    ("otsu", 101, otsu),
    ("largest_component", 102, largest_component),
    ("iou", 103, iou_raster),
    ("nms", 104, nms_greedy),
    ("roi_pool", 105, roi_pool_bins),
    ("accuracy", 106, accuracy_count),
    ("localization", 107, localization),
    ("pcl", 108, pcl_points),
    ("confusion", 109, confusion),
];

pub fn run_oracle(name: &str) -> OracleOutcome {
    let &(name, seed, check) = ORACLES.iter().find(|o| o.0 == name).expect("known oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut first = None;
    for i in 0..INSTANCES {
        if let Err(e) = check(&mut rng) {
            mismatches += 1;
            first.get_or_insert(format!("instance {i}: {e}"));
        }
    }
    OracleOutcome {
        name,
        instances: INSTANCES,
        mismatches,
        first,
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Random map whose values come from a handful of levels (so ties and
/// empty buckets are common), a continuous range, or a single constant.
fn random_map(rng: &mut ChaCha8Rng) -> AttentionMap {
    let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
    let n = h * w;
    let values = match rng.gen_range(0..4) {
        0 => {
            let levels: Vec<f64> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(-5.0..5.0)).collect();
            (0..n).map(|_| levels[rng.gen_range(0..levels.len())]).collect()
        }
        1 => vec![rng.gen_range(-3.0..3.0); n],
        2 => (0..n).map(|_| rng.gen_range(0..6) as f64).collect(),
        _ => (0..n).map(|_| rng.gen_range(-1.0..1.0f64).powi(3)).collect(),
    };
    AttentionMap {
        values,
        height: h,
        width: w,
        level: "probe".into(),
        stride: 1,
    }
}

/// Exhaustive OTSU: every boundary `k`, class statistics summed cell by
/// cell, between-class variance `(n1·s0 − n0·s1)² / (n0·n1)` compared as
/// exact fractions, first maximum kept.
fn otsu(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let bins = if rng.gen_bool(0.8) { 256 } else { rng.gen_range(2..=16) };
    let map = random_map(rng);
    let t = otsu_threshold(&map, bins);
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return ensure(t.degenerate, || "constant map not flagged degenerate".into());
    }
    let bucket = |v: f64| -> i128 {
        let b = ((v - lo) / (hi - lo) * bins as f64).floor() as i128;
        b.min(bins as i128 - 1)
    };
    let cells: Vec<i128> = map.values.iter().map(|&v| bucket(v)).collect();
    let mut best: Option<(usize, i128, i128)> = None;
    for k in 1..bins {
        let (mut n0, mut s0, mut n1, mut s1) = (0i128, 0i128, 0i128, 0i128);
        for &b in &cells {
            if b < k as i128 {
                n0 += 1;
                s0 += b;
            } else {
                n1 += 1;
                s1 += b;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let num = (n1 * s0 - n0 * s1).pow(2);
        let den = n0 * n1;
        if best.is_none_or(|(_, bn, bd)| num * bd > bn * den) {
            best = Some((k, num, den));
        }
    }
    let (k, _, _) = best.ok_or("non-constant map with no valid split")?;
    ensure(!t.degenerate && t.bucket == k, || {
        format!("threshold bucket {} vs oracle {k}", t.bucket)
    })?;
    let mask = binarize(&map, &t);
    for (i, (&b, &m)) in cells.iter().zip(&mask.cells).enumerate() {
        ensure((b >= k as i128) == m, || format!("cell {i} binarized as {m}"))?;
    }
    Ok(())
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Union-find labeling of 4-connected cells; the winner has the most
/// cells, then the smallest row-major first cell.
fn largest_component(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
    let p = rng.gen_range(0.0..1.0);
    let cells: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(p)).collect();
    let mask = BinaryMask::new(cells.clone(), h, w).map_err(|e| e.to_string())?;
    let got = largest_component_bbox(&mask);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !cells[i] {
                continue;
            }
            for j in [(c + 1 < w).then(|| i + 1), (r + 1 < h).then(|| i + w)]
                .into_iter()
                .flatten()
            {
                if cells[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // root -> (size, first cell, min col, min row, max col, max row)
    let mut comps: std::collections::BTreeMap<usize, (usize, usize, usize, usize, usize, usize)> = Default::default();
    for i in (0..h * w).filter(|&i| cells[i]) {
        let root = find(&mut parent, i);
        let (r, c) = (i / w, i % w);
        let e = comps.entry(root).or_insert((0, i, c, r, c, r));
        e.0 += 1;
        e.1 = e.1.min(i);
        e.2 = e.2.min(c);
        e.3 = e.3.min(r);
        e.4 = e.4.max(c);
        e.5 = e.5.max(r);
    }
    let winner = comps.values().max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
    match (winner, got) {
        (None, Err(_)) => Ok(()),
        (None, Ok(b)) => Err(format!("empty mask gave {b:?}")),
        (Some(_), Err(e)) => Err(format!("non-empty mask failed: {e}")),
        (Some(&(_, _, x0, y0, x1, y1)), Ok(b)) => {
            let want = [x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0];
            ensure([b.x_min, b.y_min, b.x_max, b.y_max] == want, || {
                format!("{b:?} vs oracle {want:?}")
            })
        }
    }
}

/// Box with corners on a `1/res` grid inside `[0, extent)`.
fn grid_box(rng: &mut ChaCha8Rng, extent: i64, res: i64) -> (BBox, [i64; 4]) {
    let n = extent * res;
    let (x0, y0) = (rng.gen_range(0..n), rng.gen_range(0..n));
    let (x1, y1) = (rng.gen_range(x0 + 1..=n), rng.gen_range(y0 + 1..=n));
    let r = res as f64;
    let b = BBox::new(x0 as f64 / r, y0 as f64 / r, x1 as f64 / r, y1 as f64 / r).unwrap();
    (b, [x0, y0, x1, y1])
}

fn raster_counts(a: &[i64; 4], b: &[i64; 4]) -> (i64, i64) {
    let (mut inter, mut union) = (0, 0);
    let lo_x = a[0].min(b[0]);
    let hi_x = a[2].max(b[2]);
    let lo_y = a[1].min(b[1]);
    let hi_y = a[3].max(b[3]);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let in_a = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
            let in_b = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
            inter += (in_a && in_b) as i64;
            union += (in_a || in_b) as i64;
        }
    }
    (inter, union)
}

/// IoU by counting unit cells on an integer or half-integer grid.
fn iou_raster(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let res = if rng.gen_bool(0.5) { 1 } else { 2 };
    let extent = rng.gen_range(2..=20);
    let (a, ai) = grid_box(rng, extent, res);
    let (b, bi) = if rng.gen_bool(0.1) {
        (a, ai)
    } else {
        grid_box(rng, extent, res)
    };
    let (inter, union) = raster_counts(&ai, &bi);
    let want = inter as f64 / union as f64;
    let got = iou(&a, &b);
    ensure((got - want).abs() <= IOU_TOLERANCE, || {
        format!("iou {got} vs raster {want} for {a:?} {b:?}")
    })?;
    ensure(iou(&b, &a) == got, || "iou not symmetric".into())
}

/// Greedy suppression by repeatedly taking the best remaining box and
/// discarding everything that overlaps it by more than the threshold.
fn nms_greedy(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(0..=20);
    let boxes: Vec<(BBox, [i64; 4])> = (0..n).map(|_| grid_box(rng, 16, 1)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
    let thresh = [0.0, 0.3, 0.5, 0.7, 1.0][rng.gen_range(0..5)];
    let plain: Vec<BBox> = boxes.iter().map(|b| b.0).collect();
    let got = nms(&plain, &scores, thresh);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut want = Vec::new();
    while !remaining.is_empty() {
        let mut top = remaining[0];
        for &i in &remaining {
            if scores[i] > scores[top] || (scores[i] == scores[top] && i < top) {
                top = i;
            }
        }
        want.push(top);
        remaining.retain(|&i| {
            let (inter, union) = raster_counts(&boxes[top].1, &boxes[i].1);
            i != top && inter as f64 / union as f64 <= thresh
        });
    }
    ensure(got == want, || format!("nms {got:?} vs oracle {want:?}"))
}

/// Cells overlapping the box in pixel space, split into bins where cell
/// offset `r` of a span `len` belongs to bin `i` iff
/// `i·len < (r+1)·n` and `r·n < (i+1)·len`.
fn roi_pool_bins(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let stride = [1usize, 2, 4, 8][rng.gen_range(0..4)];
    let (c, h, w) = (
        rng.gen_range(1..=3),
        rng.gen_range(1..=8usize),
        rng.gen_range(1..=8usize),
    );
    let (oh, ow) = (rng.gen_range(1..=5usize), rng.gen_range(1..=5usize));
    let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let features = Tensor::new(&[c, h, w], data.clone()).unwrap();
    let (iw, ih) = ((w * stride) as f64, (h * stride) as f64);
    let x0 = rng.gen_range(0.0..iw - 0.01);
    let y0 = rng.gen_range(0.0..ih - 0.01);
    let b = BBox::new(x0, y0, rng.gen_range(x0 + 0.01..=iw), rng.gen_range(y0 + 0.01..=ih)).unwrap();
    let got = roi_pool(&features, &b, stride, (oh, ow)).map_err(|e| e.to_string())?;
    let s = stride as f64;
    let xs: Vec<usize> = (0..w)
        .filter(|&x| (x as f64) * s < b.x_max && ((x + 1) as f64) * s > b.x_min)
        .collect();
    let ys: Vec<usize> = (0..h)
        .filter(|&y| (y as f64) * s < b.y_max && ((y + 1) as f64) * s > b.y_min)
        .collect();
    let member = |r: usize, i: usize, len: usize, n: usize| i * len < (r + 1) * n && r * n < (i + 1) * len;
    let mut want = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for by in 0..oh {
            for bx in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for (ry, &y) in ys.iter().enumerate() {
                    for (rx, &x) in xs.iter().enumerate() {
                        if member(ry, by, ys.len(), oh) && member(rx, bx, xs.len(), ow) {
                            m = m.max(data[(ch * h + y) * w + x]);
                        }
                    }
                }
                want.push(m);
            }
        }
    }
    ensure(got.dims() == [c, oh, ow], || format!("dims {:?}", got.dims()))?;
    ensure(got.data() == want.as_slice(), || {
        format!("pooled values differ for {b:?} stride {stride}")
    })
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

fn accuracy_count(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (n, classes) = (rng.gen_range(1..=60), rng.gen_range(1..=8));
    let (p, l) = (labels(rng, n, classes), labels(rng, n, classes));
    let mut hits = 0;
    for i in 0..n {
        if p[i] == l[i] {
            hits += 1;
        }
    }
    let got = accuracy(&p, &l).map_err(|e| e.to_string())?;
    ensure(got == hits as f64 / n as f64, || {
        format!("accuracy {got} vs {hits}/{n}")
    })
}

/// Hits decided in integers: IoU > 1/2 iff 2·inter > union.
fn localization(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(1..=40);
    let pairs: Vec<_> = (0..n)
        .map(|_| {
            let g = grid_box(rng, 16, 1);
            let p = if rng.gen_bool(0.3) { g } else { grid_box(rng, 16, 1) };
            (p, g)
        })
        .collect();
    let hits = pairs
        .iter()
        .filter(|(p, g)| {
            let (inter, union) = raster_counts(&p.1, &g.1);
            2 * inter > union
        })
        .count();
    let pred: Vec<BBox> = pairs.iter().map(|x| x.0 .0).collect();
    let gt: Vec<BBox> = pairs.iter().map(|x| x.1 .0).collect();
    assert_eq!(LOCALIZATION_IOU, 0.5);
    let got = localization_accuracy(&pred, &gt, LOCALIZATION_IOU).map_err(|e| e.to_string())?;
    ensure(got == hits as f64 / n as f64, || {
        format!("localization {got} vs {hits}/{n}")
    })
}

/// Part points on a half-integer grid, so many sit exactly on box edges.
fn pcl_points(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (n, k) = (rng.gen_range(1..=30), rng.gen_range(1..=4));
    let boxes: Vec<(BBox, [i64; 4])> = (0..n).map(|_| grid_box(rng, 12, 2)).collect();
    let parts: Vec<Vec<(i64, i64)>> = (0..n)
        .map(|_| (0..k).map(|_| (rng.gen_range(0..=24), rng.gen_range(0..=24))).collect())
        .collect();
    let real: Vec<Vec<(f64, f64)>> = parts
        .iter()
        .map(|p| p.iter().map(|&(x, y)| (x as f64 / 2.0, y as f64 / 2.0)).collect())
        .collect();
    let pred: Vec<BBox> = boxes.iter().map(|b| b.0).collect();
    let got = pcl(&pred, &real).map_err(|e| e.to_string())?;
    let mut mean = 0.0;
    for j in 0..k {
        let hits = (0..n)
            .filter(|&i| {
                let [x0, y0, x1, y1] = boxes[i].1;
                let (x, y) = parts[i][j];
                x0 <= x && x < x1 && y0 <= y && y < y1
            })
            .count();
        ensure(got.per_part[j] == hits as f64 / n as f64, || {
            format!("part {j}: {} vs {hits}/{n}", got.per_part[j])
        })?;
        mean += hits as f64 / n as f64 / k as f64;
    }
    ensure((got.average - mean).abs() < 1e-12, || {
        format!("average {} vs {mean}", got.average)
    })
}

/// Matrix cells counted one at a time, plus the top confused pairs found by
/// repeated scanning for the largest remaining off-diagonal cell.
fn confusion(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (n, classes) = (rng.gen_range(0..=80), rng.gen_range(1..=8));
    let (p, l) = (labels(rng, n, classes), labels(rng, n, classes));
    let got = confusion_matrix(&p, &l, classes).map_err(|e| e.to_string())?;
    for a in 0..classes {
        for q in 0..classes {
            let want = (0..n).filter(|&i| l[i] == a && p[i] == q).count();
            ensure(got[a][q] == want, || format!("cell ({a},{q}) {} vs {want}", got[a][q]))?;
        }
    }
    let k = rng.gen_range(0..=6);
    let mut taken = vec![vec![false; classes]; classes];
    let mut want = Vec::new();
    for _ in 0..k {
        let mut best: Option<(usize, usize, usize)> = None;
        for a in 0..classes {
            for q in 0..classes {
                let c = got[a][q];
                if a != q && c > 0 && !taken[a][q] && best.is_none_or(|(_, _, bc)| c > bc) {
                    best = Some((a, q, c));
                }
            }
        }
        let Some((a, q, c)) = best else { break };
        taken[a][q] = true;
        want.push((a, q, c));
    }
    let top: Vec<(usize, usize, usize)> = top_confused(&got, k)
        .into_iter()
        .map(|x| (x.actual, x.predicted, x.count))
        .collect();
    ensure(top == want, || format!("top confused {top:?} vs {want:?}"))?;
    let out_of_range = confusion_matrix(&[classes], &[0], classes);
    ensure(out_of_range.is_err(), || "out-of-range prediction accepted".into())
}
