//! Exact squared Euclidean distance transform with anisotropic spacing,
//! via the separable lower-envelope-of-parabolas method.
//!
//! The per-axis pass keeps the axis weight inside the parabola arithmetic,
//! so the final value at a voxel is literally
//! `dh^2*sh^2 + (dw^2*sw^2 + dd^2*sd^2)` for the nearest feature voxel,
//! with no intermediate rescaling.

const INF: f64 = f64::INFINITY;

/// One weighted 1-D pass: f_out(x) = min_i ((x-i)^2 * s2 + f[i]).
/// Infinite entries contribute no parabola.
fn dt1d(f: &mut [f64], s2: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    out.clear();
    out.resize(n, INF);
    for (q, &fq) in f.iter().enumerate() {
        if fq == INF {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(-INF);
                    break;
                }
                Some(&p) => {
                    // Intersection of parabola q with parabola p.
                    let qf = q as f64;
                    let pf = p as f64;
                    let s = ((fq + qf * qf * s2) - (f[p] + pf * pf * s2))
                        / (2.0 * s2 * (qf - pf));
                    if s <= z[v.len() - 1] {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0usize;
    for (x, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < x as f64 {
            k += 1;
        }
        let d = x as f64 - v[k] as f64;
        *o = d * d * s2 + f[v[k]];
    }
    f.copy_from_slice(out);
}

/// Squared distances (in mm^2) from every voxel to the nearest feature voxel.
///
/// `features` marks source voxels; voxels unreachable because the feature set
/// is empty come back as infinity.
pub fn squared_edt(
    features: &[bool],
    extents: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Vec<f64> {
    let (h, w, d) = extents;
    assert_eq!(features.len(), h * w * d);
    let mut field: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { INF }).collect();

    let mut v = Vec::new();
    let mut z = Vec::new();
    let mut out = Vec::new();
    let mut line = Vec::new();

    // Pass along d (contiguous).
    let sd2 = spacing.2 * spacing.2;
    for row in field.chunks_mut(d) {
        dt1d(row, sd2, &mut v, &mut z, &mut out);
    }

    // Pass along w.
    let sw2 = spacing.1 * spacing.1;
    for hh in 0..h {
        for dd in 0..d {
            line.clear();
            for ww in 0..w {
                line.push(field[(hh * w + ww) * d + dd]);
            }
            dt1d(&mut line, sw2, &mut v, &mut z, &mut out);
            for ww in 0..w {
                field[(hh * w + ww) * d + dd] = line[ww];
            }
        }
    }

    // Pass along h.
    let sh2 = spacing.0 * spacing.0;
    for ww in 0..w {
        for dd in 0..d {
            line.clear();
            for hh in 0..h {
                line.push(field[(hh * w + ww) * d + dd]);
            }
            dt1d(&mut line, sh2, &mut v, &mut z, &mut out);
            for hh in 0..h {
                field[(hh * w + ww) * d + dd] = line[hh];
            }
        }
    }

    field
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_voxels_are_at_distance_zero() {
        let mut features = vec![false; 27];
        features[13] = true; // center of a 3^3 grid
        let d = squared_edt(&features, (3, 3, 3), (1.0, 1.0, 1.0));
        assert_eq!(d[13], 0.0);
        assert_eq!(d[4], 1.0); // face neighbor
        assert_eq!(d[0], 3.0); // corner
    }

    #[test]
    fn spacing_scales_each_axis() {
        let mut features = vec![false; 8];
        features[0] = true;
        let d = squared_edt(&features, (2, 2, 2), (1.5, 2.0, 0.5));
        // voxel (1,0,0): 1.5^2; (0,1,0): 4.0; (0,0,1): 0.25
        assert_eq!(d[4], 2.25);
        assert_eq!(d[2], 4.0);
        assert_eq!(d[1], 0.25);
        assert_eq!(d[7], 2.25 + (4.0 + 0.25));
    }

    #[test]
    fn empty_feature_set_is_all_infinite() {
        let d = squared_edt(&[false; 8], (2, 2, 2), (1.0, 1.0, 1.0));
        assert!(d.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn matches_brute_force_on_random_grids() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (h, w, d) = (
                rng.gen_range(1..7usize),
                rng.gen_range(1..7usize),
                rng.gen_range(1..7usize),
            );
            let spacing = (
                rng.gen_range(1..9u32) as f64 / 4.0,
                rng.gen_range(1..9u32) as f64 / 4.0,
                rng.gen_range(1..9u32) as f64 / 4.0,
            );
            let features: Vec<bool> = (0..h * w * d).map(|_| rng.gen_bool(0.2)).collect();
            let fast = squared_edt(&features, (h, w, d), spacing);
            for hh in 0..h {
                for ww in 0..w {
                    for dd in 0..d {
                        let mut best = INF;
                        for fh in 0..h {
                            for fw in 0..w {
                                for fd in 0..d {
                                    if !features[(fh * w + fw) * d + fd] {
                                        continue;
                                    }
                                    let dh = (hh as f64 - fh as f64) * spacing.0;
                                    let dw = (ww as f64 - fw as f64) * spacing.1;
                                    let dz = (dd as f64 - fd as f64) * spacing.2;
                                    let v = dh * dh + (dw * dw + dz * dz);
                                    if v < best {
                                        best = v;
                                    }
                                }
                            }
                        }
                        let got = fast[(hh * w + ww) * d + dd];
                        assert!(
                            (got - best).abs() < 1e-9 || (got == best),
                            "({hh},{ww},{dd}): {got} vs {best}"
                        );
                    }
                }
            }
        }
    }
}
