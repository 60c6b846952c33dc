use super::{same_shape, MetricConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Padding};
use crate::tensor::Tensor;

/// Valid-mode separable filtering of an `[H, W]` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let src = &img[y * w..(y + 1) * w];
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().zip(&src[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for (i, &t) in taps.iter().enumerate() {
            let src = &rows[(y + i) * wo..(y + i + 1) * wo];
            for (o, s) in out[y * wo..(y + 1) * wo].iter_mut().zip(src) {
                *o += t * s;
            }
        }
    }
    out
}

fn plane_dims(op: &'static str, x: &Tensor, cfg: &MetricConfig) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape(op, format!("expected [H, W], got {:?}", s)));
    }
    if s[0] < cfg.window_size || s[1] < cfg.window_size {
        return Err(Error::shape(
            op,
            format!("window {} larger than image {:?}", cfg.window_size, s),
        ));
    }
    Ok((s[0], s[1]))
}

/// Local SSIM values over the window positions fully inside the image.
pub fn ssim_map(x: &Tensor, y: &Tensor, cfg: &MetricConfig) -> Result<Tensor> {
    same_shape("ssim", x, y)?;
    let (h, w) = plane_dims("ssim", x, cfg)?;
    let taps = cfg.window_1d();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let (a, b) = (x.data(), y.data());
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>();
    let mx = filter_valid(a, h, w, &taps);
    let my = filter_valid(b, h, w, &taps);
    let mxx = filter_valid(&prod(|p, _| p * p), h, w, &taps);
    let myy = filter_valid(&prod(|_, q| q * q), h, w, &taps);
    let mxy = filter_valid(&prod(|p, q| p * q), h, w, &taps);
    let k = cfg.window_size;
    let map = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (mxx[i] - ux * ux, myy[i] - uy * uy, mxy[i] - ux * uy);
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect();
    Tensor::new([h - k + 1, w - k + 1], map)
}

/// Mean of the Gaussian-windowed SSIM map.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &MetricConfig) -> Result<f64> {
    Ok(ssim_map(x, y, cfg)?.mean())
}

pub fn ssim_loss(x: &Tensor, y: &Tensor, cfg: &MetricConfig) -> Result<f64> {
    Ok(1.0 - ssim(x, y, cfg)?)
}

/// Adds `1 − mean SSIM` between two `[B, 1, H, W]` nodes to the graph. The
/// mean runs over batch and map positions, so for equal-sized images it is
/// the batch mean of per-pair losses.
pub fn ssim_loss_nodes(g: &mut Graph, x: NodeId, y: NodeId, cfg: &MetricConfig) -> NodeId {
    let win = g.constant(cfg.window_kernel());
    let blur = |g: &mut Graph, v: NodeId| g.conv2d(v, win, None, Padding::Valid);
    let mx = blur(g, x);
    let my = blur(g, y);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let mxx = blur(g, xx);
    let myy = blur(g, yy);
    let mxy = blur(g, xy);

    let mx2 = g.mul(mx, mx);
    let my2 = g.mul(my, my);
    let mxmy = g.mul(mx, my);
    let vx = g.sub(mxx, mx2);
    let vy = g.sub(myy, my2);
    let cxy = g.sub(mxy, mxmy);

    let l_num = g.affine(mxmy, 2.0, cfg.c1());
    let c_num = g.affine(cxy, 2.0, cfg.c2());
    let num = g.mul(l_num, c_num);
    let l_den = g.add(mx2, my2);
    let l_den = g.affine(l_den, 1.0, cfg.c1());
    let c_den = g.add(vx, vy);
    let c_den = g.affine(c_den, 1.0, cfg.c2());
    let den = g.mul(l_den, c_den);
    let map = g.div(num, den);
    let m = g.mean(map);
    g.affine(m, -1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Bindings;
    use crate::rng::RngStream;

    #[test]
    fn identity_and_uniform_closed_form() {
        let cfg = MetricConfig::default();
        let mut rng = RngStream::new(5, 0);
        let x = Tensor::from_fn([16, 16], |_| rng.uniform());
        assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let a = Tensor::full([16, 16], 0.5);
        let b = Tensor::full([16, 16], 0.25);
        let expected = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
        assert!((ssim(&a, &b, &cfg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_matches_direct() {
        let cfg = MetricConfig::default();
        let mut rng = RngStream::new(6, 0);
        let x = Tensor::from_fn([1, 1, 16, 16], |_| rng.uniform());
        let y = Tensor::from_fn([1, 1, 16, 16], |_| rng.uniform());
        let mut g = Graph::new();
        let (xn, yn) = (g.input("x"), g.input("y"));
        let loss = ssim_loss_nodes(&mut g, xn, yn, &cfg);
        let v = g
            .evaluate(loss, &Bindings::new().with(xn, &x).with(yn, &y))
            .unwrap()
            .item()
            .unwrap();
        let flat = |t: &Tensor| t.clone().reshape([16, 16]).unwrap();
        assert!((v - ssim_loss(&flat(&x), &flat(&y), &cfg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn window_larger_than_image_is_an_error() {
        let t = Tensor::zeros([8, 8]);
        assert!(ssim(&t, &t, &MetricConfig::default()).is_err());
    }
}
