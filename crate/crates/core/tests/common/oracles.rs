//! Independent reference implementations used by the tests.

use cbctseg::fusion::{staple_fuse, FusionConfig, PriorSource};
use cbctseg::LabelGrid;

pub struct StapleOracle {
    pub posteriors: Vec<Vec<f64>>,
    pub consensus: Vec<u16>,
    pub theta: Vec<Vec<Vec<f64>>>,
}

fn modal(votes: &[u16], num_labels: usize) -> usize {
    let mut counts = vec![0usize; num_labels];
    for &v in votes {
        counts[v as usize] += 1;
    }
    // first maximum = lowest label among ties
    let mut best = 0;
    for s in 1..num_labels {
        if counts[s] > counts[best] {
            best = s;
        }
    }
    best
}

pub fn brute_force_staple(d: &[Vec<u16>], num_labels: usize, diag: f64, tol: f64, max_iter: usize, uniform: bool) -> StapleOracle {
    let k = d.len();
    let n = d[0].len();
    let l = num_labels;
    let prior: Vec<f64> = if uniform {
        let mut used = vec![false; l];
        for r in d {
            for &v in r {
                used[v as usize] = true;
            }
        }
        let m = used.iter().filter(|&&u| u).count() as f64;
        used.iter().map(|&u| if u { 1.0 / m } else { 0.0 }).collect()
    } else {
        let mut f = vec![0.0; l];
        for i in 0..n {
            let votes: Vec<u16> = d.iter().map(|r| r[i]).collect();
            f[modal(&votes, l)] += 1.0;
        }
        f.iter().map(|x| x / n as f64).collect()
    };
    let off = (1.0 - diag) / (l - 1) as f64;
    let mut theta: Vec<Vec<Vec<f64>>> = vec![
        (0..l)
            .map(|s| (0..l).map(|t| if s == t { diag } else { off }).collect())
            .collect();
        k
    ];
    let e_step = |theta: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut w: Vec<f64> = (0..l)
                    .map(|s| {
                        let mut p = prior[s];
                        for j in 0..k {
                            p *= theta[j][s][d[j][i] as usize];
                        }
                        p
                    })
                    .collect();
                let z: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= z);
                w
            })
            .collect()
    };
    for _ in 0..max_iter {
        let w = e_step(&theta);
        let mut next = theta.clone();
        for j in 0..k {
            for s in 0..l {
                let denom: f64 = (0..n).map(|i| w[i][s]).sum();
                if denom > 0.0 {
                    for t in 0..l {
                        let num: f64 = (0..n).filter(|&i| d[j][i] as usize == t).map(|i| w[i][s]).sum();
                        next[j][s][t] = num / denom;
                    }
                }
            }
        }
        let mut delta: f64 = 0.0;
        for j in 0..k {
            for s in 0..l {
                for t in 0..l {
                    delta = delta.max((next[j][s][t] - theta[j][s][t]).abs());
                }
            }
        }
        theta = next;
        if delta < tol {
            break;
        }
    }
    let posteriors = e_step(&theta);
    let consensus = posteriors
        .iter()
        .map(|w| {
            let mut best = 0;
            for s in 1..l {
                if w[s] > w[best] {
                    best = s;
                }
            }
            best as u16
        })
        .collect();
    StapleOracle {
        posteriors,
        consensus,
        theta,
    }
}


/// Components of `class` by depth-first flood fill. Two voxels are
/// neighbors when every coordinate differs by at most one and the number of
/// differing coordinates is at most 1, 2 or 3 for 6-, 18- and
/// 26-connectivity. Returned as sorted voxel lists, largest first, ties by
/// smallest index.
pub fn flood_fill_components(data: &[u16], dims: [usize; 3], class: u16, conn: u8) -> Vec<Vec<usize>> {
    let max_changed = match conn {
        6 => 1,
        18 => 2,
        26 => 3,
        _ => panic!("connectivity {conn}"),
    };
    let [nx, ny, nz] = dims;
    let mut comp = vec![usize::MAX; data.len()];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for start in 0..data.len() {
        if data[start] != class || comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = Vec::new();
        let mut stack = vec![start];
        comp[start] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for zz in z.saturating_sub(1)..=(z + 1).min(nz - 1) {
                for yy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                        let changed = (xx != x) as u8 + (yy != y) as u8 + (zz != z) as u8;
                        if changed == 0 || changed > max_changed {
                            continue;
                        }
                        let j = xx + nx * (yy + ny * zz);
                        if data[j] == class && comp[j] == usize::MAX {
                            comp[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    out
}

/// Run STAPLE and the brute-force EM on the same raters and return the
/// largest difference over posteriors and confusion matrices. A consensus
/// mismatch is an error unless the oracle has an exact tie there.
pub fn staple_max_diff(raters: &[LabelGrid], num_labels: usize, prior: PriorSource) -> Result<f64, String> {
    let cfg = FusionConfig {
        tolerance: 1e-11,
        max_iterations: 2000,
        num_labels: Some(num_labels),
        keep_posteriors: true,
        prior,
        ..FusionConfig::default()
    };
    let r = staple_fuse(raters, &cfg).map_err(|e| e.to_string())?;
    let d: Vec<Vec<u16>> = raters.iter().map(|r| r.data().to_vec()).collect();
    let o = brute_force_staple(&d, num_labels, 0.9, 1e-11, 2000, prior == PriorSource::Uniform);
    let post = r.posteriors.as_ref().ok_or("posteriors missing")?;
    let mut worst: f64 = 0.0;
    for (i, w) in o.posteriors.iter().enumerate() {
        let got = post.voxel(i);
        for s in 0..num_labels {
            worst = worst.max((got[s] - w[s]).abs());
        }
        let c = r.consensus.data()[i];
        if c != o.consensus[i] && (w[c as usize] - w[o.consensus[i] as usize]).abs() >= 1e-9 {
            return Err(format!("voxel {i}: consensus {c} vs oracle {}", o.consensus[i]));
        }
    }
    for (j, m) in r.model.confusion.iter().enumerate() {
        for s in 0..num_labels {
            for t in 0..num_labels {
                worst = worst.max((m.get(s, t) - o.theta[j][s][t]).abs());
            }
        }
    }
    Ok(worst)
}
