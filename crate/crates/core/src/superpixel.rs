//! SLIC over-segmentation, the superpixel adjacency graph, radius-k
//! neighborhoods, and the four nested zoom-out regions per superpixel.

use crate::binio;
use crate::imagecore::LabImage;
use crate::{Error, Result};
use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

/// Half-open pixel rectangle: x in [x0,x1), y in [y0,y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SlicParams {
    /// Target superpixel count.
    pub k: usize,
    /// Compactness: tradeoff between spatial and color proximity.
    pub m: f32,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            k: 500,
            m: 15.0,
            iterations: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelInfo {
    pub id: u32,
    pub centroid: (f64, f64),
    pub bbox: Rect,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Superpixelization {
    pub width: usize,
    pub height: usize,
    /// Per-pixel superpixel id, row-major.
    pub ids: Vec<u32>,
    pub superpixels: Vec<SuperpixelInfo>,
}

impl Superpixelization {
    pub fn count(&self) -> usize {
        self.superpixels.len()
    }

    #[inline]
    pub fn id_at(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    /// Rebuilds per-superpixel geometry from an id map; ids must already be
    /// contiguous in 0..count.
    pub fn from_id_map(width: usize, height: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::Dimension("id map does not match image size".into()));
        }
        let count = match ids.iter().max() {
            Some(&m) => m as usize + 1,
            None => return Err(Error::Data("empty id map".into())),
        };
        let mut infos: Vec<SuperpixelInfo> = (0..count)
            .map(|id| SuperpixelInfo {
                id: id as u32,
                centroid: (0.0, 0.0),
                bbox: Rect {
                    x0: usize::MAX,
                    y0: usize::MAX,
                    x1: 0,
                    y1: 0,
                },
                pixel_count: 0,
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let id = ids[y * width + x] as usize;
                let info = &mut infos[id];
                info.pixel_count += 1;
                info.centroid.0 += x as f64;
                info.centroid.1 += y as f64;
                info.bbox.x0 = info.bbox.x0.min(x);
                info.bbox.y0 = info.bbox.y0.min(y);
                info.bbox.x1 = info.bbox.x1.max(x + 1);
                info.bbox.y1 = info.bbox.y1.max(y + 1);
            }
        }
        for info in &mut infos {
            if info.pixel_count == 0 {
                return Err(Error::Data(format!(
                    "superpixel id {} owns no pixels; ids must be contiguous",
                    info.id
                )));
            }
            info.centroid.0 /= info.pixel_count as f64;
            info.centroid.1 /= info.pixel_count as f64;
        }
        Ok(Superpixelization {
            width,
            height,
            ids,
            superpixels: infos,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelGraph {
    /// Sorted neighbor lists; symmetric and irreflexive.
    pub adjacency: Vec<Vec<u32>>,
}

impl SuperpixelGraph {
    pub fn neighbors(&self, s: u32) -> &[u32] {
        &self.adjacency[s as usize]
    }
}

/// The four nested scopes per superpixel. Proximal is kept as the id set of
/// the radius-2 superpixel union (including s); distant is the bounding box
/// of the radius-3 union; global is the whole image.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoomRegions {
    pub width: usize,
    pub height: usize,
    pub local: Vec<Rect>,
    pub proximal_ids: Vec<Vec<u32>>,
    pub distant: Vec<Rect>,
}

impl ZoomRegions {
    pub fn global(&self) -> Rect {
        Rect {
            x0: 0,
            y0: 0,
            x1: self.width,
            y1: self.height,
        }
    }
}

struct Center {
    l: f32,
    a: f32,
    b: f32,
    x: f32,
    y: f32,
}

/// SLIC over-segmentation in Lab space. Centers are seeded on a regular grid,
/// perturbed to the lowest-gradient spot in a 3x3 window, then refined with
/// k-means-style rounds over a 2S x 2S search window. Orphan components are
/// absorbed into the largest adjacent superpixel and ids relabeled
/// contiguously.
pub fn slic_oversegment(img: &LabImage, p: &SlicParams) -> Result<Superpixelization> {
    let (w, h) = (img.width, img.height);
    if w < 2 || h < 2 {
        return Err(Error::Dimension("image must be at least 2x2 for SLIC".into()));
    }
    if p.k < 1 || p.m <= 0.0 || p.iterations < 1 {
        return Err(Error::Data("invalid SLIC parameters".into()));
    }
    let step = ((w * h) as f64 / p.k as f64).sqrt();
    if step < 1.0 {
        return Err(Error::Data(format!(
            "target count {} exceeds pixel count {}",
            p.k,
            w * h
        )));
    }
    let nx = ((w as f64 / step).round() as usize).max(1);
    let ny = ((h as f64 / step).round() as usize).max(1);

    let grad = gradient_magnitude(img);
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = ((i as f64 + 0.5) * w as f64 / nx as f64) as usize;
            let cy = ((j as f64 + 0.5) * h as f64 / ny as f64) as usize;
            let (cx, cy) = lowest_gradient_3x3(&grad, w, h, cx.min(w - 1), cy.min(h - 1));
            let [l, a, b] = img.lab(cx, cy);
            centers.push(Center {
                l,
                a,
                b,
                x: cx as f32,
                y: cy as f32,
            });
        }
    }

    let s = step as f32;
    let ratio = p.m / s; // spatial weight per unit distance
    let win = (2.0 * step).ceil() as isize;
    let mut labels = vec![u32::MAX; w * h];
    let mut dists = vec![f32::INFINITY; w * h];

    for _ in 0..p.iterations {
        dists.iter_mut().for_each(|d| *d = f32::INFINITY);
        // clusters in ascending id with strict < keeps ties on the lower id
        for (ci, c) in centers.iter().enumerate() {
            let x0 = (c.x as isize - win).max(0) as usize;
            let x1 = ((c.x as isize + win + 1) as usize).min(w);
            let y0 = (c.y as isize - win).max(0) as usize;
            let y1 = ((c.y as isize + win + 1) as usize).min(h);
            for y in y0..y1 {
                let row = y * w;
                for x in x0..x1 {
                    let [l, a, b] = img.lab(x, y);
                    let dl = l - c.l;
                    let da = a - c.a;
                    let db = b - c.b;
                    let dx = x as f32 - c.x;
                    let dy = y as f32 - c.y;
                    let d_lab2 = dl * dl + da * da + db * db;
                    let d_xy2 = dx * dx + dy * dy;
                    let d = d_lab2 + d_xy2 * ratio * ratio;
                    let idx = row + x;
                    if d < dists[idx] {
                        dists[idx] = d;
                        labels[idx] = ci as u32;
                    }
                }
            }
        }
        // pixels outside every search window fall back to the nearest center
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if labels[idx] == u32::MAX {
                    let mut best = f32::INFINITY;
                    let mut best_ci = 0u32;
                    for (ci, c) in centers.iter().enumerate() {
                        let dx = x as f32 - c.x;
                        let dy = y as f32 - c.y;
                        let d = dx * dx + dy * dy;
                        if d < best {
                            best = d;
                            best_ci = ci as u32;
                        }
                    }
                    labels[idx] = best_ci;
                }
            }
        }
        // recompute centers
        let mut sums = vec![[0f64; 6]; centers.len()];
        for y in 0..h {
            for x in 0..w {
                let ci = labels[y * w + x] as usize;
                let [l, a, b] = img.lab(x, y);
                let sm = &mut sums[ci];
                sm[0] += l as f64;
                sm[1] += a as f64;
                sm[2] += b as f64;
                sm[3] += x as f64;
                sm[4] += y as f64;
                sm[5] += 1.0;
            }
        }
        for (c, sm) in centers.iter_mut().zip(&sums) {
            if sm[5] > 0.0 {
                c.l = (sm[0] / sm[5]) as f32;
                c.a = (sm[1] / sm[5]) as f32;
                c.b = (sm[2] / sm[5]) as f32;
                c.x = (sm[3] / sm[5]) as f32;
                c.y = (sm[4] / sm[5]) as f32;
            }
        }
    }

    let ids = enforce_connectivity(&labels, w, h);
    Superpixelization::from_id_map(w, h, ids)
}

fn gradient_magnitude(img: &LabImage) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let mut grad = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            let gx = diff2(img.lab(xp, y), img.lab(xm, y));
            let gy = diff2(img.lab(x, yp), img.lab(x, ym));
            grad[y * w + x] = gx + gy;
        }
    }
    grad
}

#[inline]
fn diff2(a: [f32; 3], b: [f32; 3]) -> f32 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

fn lowest_gradient_3x3(grad: &[f32], w: usize, h: usize, cx: usize, cy: usize) -> (usize, usize) {
    let mut best = f32::INFINITY;
    let mut pos = (cx, cy);
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let x = cx as isize + dx;
            let y = cy as isize + dy;
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                continue;
            }
            let g = grad[y as usize * w + x as usize];
            if g < best {
                best = g;
                pos = (x as usize, y as usize);
            }
        }
    }
    pos
}

/// Splits the label map into 4-connected components, keeps the largest
/// component of every cluster, and repeatedly absorbs each remaining orphan
/// component into its largest adjacent region. Final regions get contiguous
/// ids in scan order of their first pixel.
fn enforce_connectivity(labels: &[u32], w: usize, h: usize) -> Vec<u32> {
    let n = w * h;
    let mut comp = vec![u32::MAX; n];
    let mut comp_cluster: Vec<u32> = Vec::new();
    let mut comp_size: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != u32::MAX {
            continue;
        }
        let cid = comp_cluster.len() as u32;
        let cluster = labels[start];
        comp_cluster.push(cluster);
        comp_size.push(0);
        comp[start] = cid;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            comp_size[cid as usize] += 1;
            let (x, y) = (idx % w, idx / w);
            let mut visit = |nidx: usize| {
                if comp[nidx] == u32::MAX && labels[nidx] == cluster {
                    comp[nidx] = cid;
                    queue.push_back(nidx);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < w {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - w);
            }
            if y + 1 < h {
                visit(idx + w);
            }
        }
    }
    let ncomp = comp_cluster.len();

    // component adjacency (4-connectivity)
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); ncomp];
    let add_edge = |adj: &mut Vec<Vec<u32>>, a: u32, b: u32| {
        if a != b {
            if !adj[a as usize].contains(&b) {
                adj[a as usize].push(b);
            }
            if !adj[b as usize].contains(&a) {
                adj[b as usize].push(a);
            }
        }
    };
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if x + 1 < w {
                add_edge(&mut adj, comp[idx], comp[idx + 1]);
            }
            if y + 1 < h {
                add_edge(&mut adj, comp[idx], comp[idx + w]);
            }
        }
    }

    // largest component of each cluster is the core (ties to lower component id)
    let max_cluster = comp_cluster.iter().copied().max().unwrap_or(0) as usize;
    let mut best_of_cluster: Vec<Option<u32>> = vec![None; max_cluster + 1];
    for c in 0..ncomp {
        let cl = comp_cluster[c] as usize;
        match best_of_cluster[cl] {
            Some(prev) if comp_size[prev as usize] >= comp_size[c] => {}
            _ => best_of_cluster[cl] = Some(c as u32),
        }
    }
    let mut is_core = vec![false; ncomp];
    for b in best_of_cluster.iter().flatten() {
        is_core[*b as usize] = true;
    }

    // union-find over components
    let mut parent: Vec<u32> = (0..ncomp as u32).collect();
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }
    let mut root_size = comp_size.clone();
    let mut root_core = is_core.clone();
    loop {
        let mut changed = false;
        for c in 0..ncomp as u32 {
            let rc = find(&mut parent, c);
            if root_core[rc as usize] {
                continue;
            }
            // absorb this orphan group into the largest adjacent region
            let mut target: Option<u32> = None;
            for &nb in &adj[c as usize] {
                let rn = find(&mut parent, nb);
                if rn == rc {
                    continue;
                }
                let better = match target {
                    None => true,
                    Some(t) => {
                        root_size[rn as usize] > root_size[t as usize]
                            || (root_size[rn as usize] == root_size[t as usize] && rn < t)
                    }
                };
                if better {
                    target = Some(rn);
                }
            }
            if let Some(t) = target {
                parent[rc as usize] = t;
                root_size[t as usize] += root_size[rc as usize];
                root_core[t as usize] = root_core[t as usize] || root_core[rc as usize];
                changed = true;
            }
        }
        let all_done = (0..ncomp as u32).all(|c| {
            let r = find(&mut parent, c);
            root_core[r as usize]
        });
        if all_done || !changed {
            break;
        }
    }

    // contiguous relabel in scan order of first pixel
    let mut new_id = vec![u32::MAX; ncomp];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for idx in 0..n {
        let r = find(&mut parent, comp[idx]) as usize;
        if new_id[r] == u32::MAX {
            new_id[r] = next;
            next += 1;
        }
        out[idx] = new_id[r];
    }
    out
}

/// Two superpixels are adjacent iff some pixel of one 4-neighbors a pixel of
/// the other.
pub fn build_adjacency(sp: &Superpixelization) -> SuperpixelGraph {
    let n = sp.count();
    let (w, h) = (sp.width, sp.height);
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    let add = |adjacency: &mut Vec<Vec<u32>>, a: u32, b: u32| {
        if a != b {
            if !adjacency[a as usize].contains(&b) {
                adjacency[a as usize].push(b);
            }
            if !adjacency[b as usize].contains(&a) {
                adjacency[b as usize].push(a);
            }
        }
    };
    for y in 0..h {
        for x in 0..w {
            let id = sp.ids[y * w + x];
            if x + 1 < w {
                add(&mut adjacency, id, sp.ids[y * w + x + 1]);
            }
            if y + 1 < h {
                add(&mut adjacency, id, sp.ids[(y + 1) * w + x]);
            }
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    SuperpixelGraph { adjacency }
}

/// All superpixels within graph distance `radius` of `s`, excluding `s` itself.
pub fn neighborhood(g: &SuperpixelGraph, s: u32, radius: usize) -> Result<Vec<u32>> {
    let n = g.adjacency.len();
    if s as usize >= n {
        return Err(Error::Data(format!("superpixel id {s} out of range {n}")));
    }
    let mut dist = vec![usize::MAX; n];
    dist[s as usize] = 0;
    let mut queue = VecDeque::from([s]);
    let mut out = Vec::new();
    while let Some(u) = queue.pop_front() {
        let d = dist[u as usize];
        if d == radius {
            continue;
        }
        for &v in &g.adjacency[u as usize] {
            if dist[v as usize] == usize::MAX {
                dist[v as usize] = d + 1;
                out.push(v);
                queue.push_back(v);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Per superpixel: local = its bounding box, proximal = {s} plus the radius-2
/// neighborhood, distant = bounding box of {s} plus the radius-3 neighborhood,
/// global = the whole image.
pub fn compute_zoom_regions(
    sp: &Superpixelization,
    g: &SuperpixelGraph,
    proximal_radius: usize,
    distant_radius: usize,
) -> Result<ZoomRegions> {
    let mut local = Vec::with_capacity(sp.count());
    let mut proximal_ids = Vec::with_capacity(sp.count());
    let mut distant = Vec::with_capacity(sp.count());
    for info in &sp.superpixels {
        local.push(info.bbox);
        let mut prox = neighborhood(g, info.id, proximal_radius)?;
        prox.push(info.id);
        prox.sort_unstable();
        let dist_ids = neighborhood(g, info.id, distant_radius)?;
        let mut bbox = info.bbox;
        for &t in &dist_ids {
            let tb = &sp.superpixels[t as usize].bbox;
            bbox.x0 = bbox.x0.min(tb.x0);
            bbox.y0 = bbox.y0.min(tb.y0);
            bbox.x1 = bbox.x1.max(tb.x1);
            bbox.y1 = bbox.y1.max(tb.y1);
        }
        proximal_ids.push(prox);
        distant.push(bbox);
    }
    Ok(ZoomRegions {
        width: sp.width,
        height: sp.height,
        local,
        proximal_ids,
        distant,
    })
}

const ZOSP_MAGIC: &[u8; 4] = b"ZOSP";
const ZOSP_VERSION: u32 = 1;

pub fn save_superpixelization(sp: &Superpixelization, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    binio::write_magic(&mut w, ZOSP_MAGIC).map_err(io_err)?;
    binio::write_u32(&mut w, ZOSP_VERSION).map_err(io_err)?;
    binio::write_u32(&mut w, sp.width as u32).map_err(io_err)?;
    binio::write_u32(&mut w, sp.height as u32).map_err(io_err)?;
    binio::write_u32(&mut w, sp.count() as u32).map_err(io_err)?;
    for &id in &sp.ids {
        w.write_all(&id.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

pub fn load_superpixelization(path: &Path) -> Result<Superpixelization> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    binio::read_magic(&mut r, ZOSP_MAGIC)?;
    let version = binio::read_u32(&mut r)?;
    if version != ZOSP_VERSION {
        return Err(Error::Format(format!("unsupported ZOSP version {version}")));
    }
    let width = binio::read_u32(&mut r)? as usize;
    let height = binio::read_u32(&mut r)? as usize;
    let count = binio::read_u32(&mut r)? as usize;
    let ids = binio::read_u32_vec(&mut r, width * height)?;
    let sp = Superpixelization::from_id_map(width, height, ids)?;
    if sp.count() != count {
        return Err(Error::Format(format!(
            "header count {count} does not match id map ({})",
            sp.count()
        )));
    }
    Ok(sp)
}
