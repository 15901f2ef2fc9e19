//! Operation accounting and indicative latency.
//!
//! [`count_ops`] derives per-image counts from layer geometry alone.
//! [`instrumented_forward`] is a plain scalar evaluation of the network that
//! increments a counter at every arithmetic operation it performs. The two
//! are kept independent so each checks the other.
//!
//! Conventions: a classical layer costs one mult per product and one add per
//! product (summing the products, then adding the bias). A BM layer spends one compare
//! and one `ln` per input per sign branch, then per output and path one add
//! per field entry, one fewer max, and one `exp`; the path combination and
//! the bias are four adds per output. Negation and the saturation clamp are
//! not counted. Softmax divisions are counted as mults of the softmax layer,
//! which is why [`OpReport::core_mults`] looks only at conv/fc layers.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bm::{BmWeights, Geometry};
use crate::error::{Error, Result};
use crate::layers::{LayerKind, LayerParams, Mode, NetworkSpec};
use crate::tensor::kernels::saturation_limit;
use crate::tensor::{Tensor, NEG_INF};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounters {
    pub mults: u64,
    pub adds: u64,
    pub maxes: u64,
    pub exps: u64,
    pub lns: u64,
    pub compares: u64,
}

impl OpCounters {
    pub fn scaled(self, n: u64) -> Self {
        Self {
            mults: self.mults * n,
            adds: self.adds * n,
            maxes: self.maxes * n,
            exps: self.exps * n,
            lns: self.lns * n,
            compares: self.compares * n,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

impl Add for OpCounters {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            mults: self.mults + o.mults,
            adds: self.adds + o.adds,
            maxes: self.maxes + o.maxes,
            exps: self.exps + o.exps,
            lns: self.lns + o.lns,
            compares: self.compares + o.compares,
        }
    }
}

impl AddAssign for OpCounters {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerOps {
    pub layer: String,
    pub kind: &'static str,
    pub counters: OpCounters,
}

/// Per-layer counters for one image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpReport {
    pub layers: Vec<LayerOps>,
}

const COLUMNS: [&str; 8] = ["layer", "kind", "mults", "adds", "maxes", "exps", "lns", "compares"];

impl OpReport {
    pub fn total(&self) -> OpCounters {
        self.layers.iter().fold(OpCounters::default(), |a, l| a + l.counters)
    }

    /// Multiplications inside conv/fc layers (classical or BM).
    pub fn core_mults(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, "conv" | "fc" | "bmconv" | "bmfc"))
            .map(|l| l.counters.mults)
            .sum()
    }

    pub fn layer(&self, name: &str) -> Option<&OpCounters> {
        self.layers.iter().find(|l| l.layer == name).map(|l| &l.counters)
    }

    fn rows(&self) -> Vec<[String; 8]> {
        let row = |layer: &str, kind: &str, c: &OpCounters| {
            [
                layer.to_string(),
                kind.to_string(),
                c.mults.to_string(),
                c.adds.to_string(),
                c.maxes.to_string(),
                c.exps.to_string(),
                c.lns.to_string(),
                c.compares.to_string(),
            ]
        };
        let mut rows: Vec<_> = self.layers.iter().map(|l| row(&l.layer, l.kind, &l.counters)).collect();
        rows.push(row("total", "", &self.total()));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory write");
        for r in self.rows() {
            w.write_record(&r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n|{}\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
        for r in self.rows() {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        out
    }
}

fn kind_name(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv(_) => "conv",
        LayerKind::Fc { .. } => "fc",
        LayerKind::Relu => "relu",
        LayerKind::MaxPool { .. } => "maxpool",
        LayerKind::Dropout { .. } => "dropout",
        LayerKind::Softmax => "softmax",
        LayerKind::BmConv(_) => "bmconv",
        LayerKind::BmFc { .. } => "bmfc",
    }
}

/// Analytic per-image counts of an eval-mode forward pass on `input_shape`.
pub fn count_ops(net: &NetworkSpec, input_shape: [usize; 3]) -> Result<OpReport> {
    let spec = NetworkSpec::new(input_shape, net.layers().to_vec())?;
    let mut layers = Vec::new();
    for (l, (input, output, geom)) in spec.layers().iter().zip(spec.layer_geometry()?) {
        let n_in = input.iter().product::<usize>() as u64;
        let n_out = output.iter().product::<usize>() as u64;
        let fan_in = geom.map_or(0, |g| g.weight_shape()[1..].iter().product::<usize>() as u64);
        let products = n_out * fan_in;
        let c = match &l.kind {
            LayerKind::Conv(_) | LayerKind::Fc { .. } => OpCounters {
                mults: products,
                adds: products,
                ..Default::default()
            },
            LayerKind::BmConv(_) | LayerKind::BmFc { .. } => OpCounters {
                adds: 4 * products + 4 * n_out,
                maxes: 4 * (products - n_out),
                exps: 4 * n_out,
                lns: 2 * n_in,
                compares: 2 * n_in,
                ..Default::default()
            },
            LayerKind::Relu => OpCounters {
                compares: n_in,
                ..Default::default()
            },
            LayerKind::MaxPool { kh, kw } => OpCounters {
                maxes: n_out * (kh * kw - 1) as u64,
                ..Default::default()
            },
            LayerKind::Dropout { .. } => OpCounters::default(),
            LayerKind::Softmax => OpCounters {
                mults: n_in,
                adds: 2 * n_in - 1,
                maxes: n_in - 1,
                exps: n_in,
                ..Default::default()
            },
        };
        layers.push(LayerOps {
            layer: l.name.clone(),
            kind: kind_name(&l.kind),
            counters: c,
        });
    }
    Ok(OpReport { layers })
}

/// Scalar feature map with its `c × h × w` shape (`h = w = 1` for vectors).
struct Map {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Map {
    fn at(&self, c: usize, y: isize, x: isize, fill: f64) -> f64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            fill
        } else {
            self.data[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

/// Visits every output coordinate and, for each, every field entry as
/// `(out_index, weight_index, input value)`, in weight-row order.
fn correlate(
    geom: Geometry,
    input: &Map,
    fill: f64,
    mut out: impl FnMut(usize, &mut dyn Iterator<Item = (usize, f64)>),
) -> (usize, usize, usize) {
    match geom {
        Geometry::Dense { inputs, outputs } => {
            for k in 0..outputs {
                let mut it = (0..inputs).map(|i| (k * inputs + i, input.data[i]));
                out(k, &mut it);
            }
            (outputs, 1, 1)
        }
        Geometry::Conv {
            in_ch,
            out_ch,
            kh,
            kw,
            stride,
            pad,
        } => {
            let oh = (input.h + 2 * pad - kh) / stride + 1;
            let ow = (input.w + 2 * pad - kw) / stride + 1;
            for o in 0..out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut it = (0..in_ch * kh * kw).map(|f| {
                            let (ic, r) = (f / (kh * kw), f % (kh * kw));
                            let (ky, kx) = (r / kw, r % kw);
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            (o * in_ch * kh * kw + f, input.at(ic, y, x, fill))
                        });
                        out((o * oh + oy) * ow + ox, &mut it);
                    }
                }
            }
            (out_ch, oh, ow)
        }
    }
}

fn classical_layer(geom: Geometry, x: &Map, w: &Tensor, b: &Tensor, c: &mut OpCounters) -> Map {
    let (w, b) = (w.data(), b.data());
    let mut sums = Vec::new();
    let (oc, oh, ow) = correlate(geom, x, 0.0, |k, field| {
        // The first product starts the accumulator; the bias add comes after.
        let mut acc: Option<f64> = None;
        for (wi, xv) in field {
            let p = xv * w[wi];
            c.mults += 1;
            acc = Some(acc.map_or(p, |a| {
                c.adds += 1;
                a + p
            }));
        }
        sums.push((k, acc.unwrap_or(0.0)));
    });
    let mut data = vec![0.0; oc * oh * ow];
    for (k, v) in sums {
        data[k] = v + b[k / (oh * ow)];
        c.adds += 1;
    }
    Map {
        c: oc,
        h: oh,
        w: ow,
        data,
    }
}

fn bm_layer(geom: Geometry, x: &Map, bw: &BmWeights, c: &mut OpCounters) -> Map {
    let mut logs = [Vec::with_capacity(x.data.len()), Vec::with_capacity(x.data.len())];
    for &v in &x.data {
        for (branch, s) in [v, -v].into_iter().enumerate() {
            c.compares += 1;
            let r = if s > 0.0 { s } else { 0.0 };
            c.lns += 1;
            logs[branch].push(if r > 0.0 { r.ln() } else { NEG_INF });
        }
    }
    let limit = saturation_limit();
    let weights = [bw.v0.data(), bw.v1.data()];
    let mut paths: [Vec<(usize, f64)>; 4] = Default::default();
    let mut dims = (0, 0, 0);
    for (p, (xb, wb)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let xm = Map {
            c: x.c,
            h: x.h,
            w: x.w,
            data: std::mem::take(&mut logs[xb]),
        };
        let v = weights[wb];
        dims = correlate(geom, &xm, NEG_INF, |k, field| {
            let mut acc: Option<f64> = None;
            for (wi, xv) in field {
                let s = xv + v[wi];
                c.adds += 1;
                acc = Some(match acc {
                    None => s,
                    Some(a) => {
                        c.maxes += 1;
                        if s > a { s } else { a }
                    }
                });
            }
            let m = acc.unwrap_or(NEG_INF).min(limit);
            c.exps += 1;
            paths[p].push((k, if m == NEG_INF { 0.0 } else { m.exp() }));
        });
        logs[xb] = xm.data;
    }
    let n = dims.0 * dims.1 * dims.2;
    let mut data = vec![0.0; n];
    let bias = bw.bias.data();
    for k in 0..n {
        let y = (paths[0][k].1 - paths[1][k].1) - (paths[2][k].1 - paths[3][k].1);
        data[k] = y + bias[k / (dims.1 * dims.2)];
        c.adds += 4;
    }
    Map {
        c: dims.0,
        h: dims.1,
        w: dims.2,
        data,
    }
}

/// Scalar eval-mode forward of one `c × h × w` image, counting every operation.
/// Returns the network output and the per-layer counters.
pub fn instrumented_forward(net: &NetworkSpec, image: &[f64]) -> Result<(Vec<f64>, OpReport)> {
    net.check_params()?;
    let [c, h, w] = net.input_shape();
    if image.len() != c * h * w {
        return Err(Error::shape("instrumented_forward", format!("image of {} values, expected {}", image.len(), c * h * w)));
    }
    let mut x = Map {
        c,
        h,
        w,
        data: image.to_vec(),
    };
    let mut layers = Vec::new();
    for l in net.layers() {
        let mut cnt = OpCounters::default();
        x = match (&l.kind, net.params.get(&l.name)) {
            (LayerKind::Conv(_) | LayerKind::Fc { .. }, Some(LayerParams::Classical { weight, bias })) => {
                let g = net.geometry_of(&l.name)?;
                classical_layer(g, &flatten_for(g, x), weight, bias, &mut cnt)
            }
            (LayerKind::BmConv(_) | LayerKind::BmFc { .. }, Some(LayerParams::Bm(bw))) => {
                bm_layer(bw.geometry, &flatten_for(bw.geometry, x), bw, &mut cnt)
            }
            (LayerKind::Relu, _) => {
                for v in x.data.iter_mut() {
                    cnt.compares += 1;
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                x
            }
            (LayerKind::MaxPool { kh, kw }, _) => {
                let (oh, ow) = (x.h / kh, x.w / kw);
                let mut data = Vec::with_capacity(x.c * oh * ow);
                for ch in 0..x.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = x.at(ch, (oy * kh) as isize, (ox * kw) as isize, 0.0);
                            for i in 1..kh * kw {
                                let v = x.at(ch, (oy * kh + i / kw) as isize, (ox * kw + i % kw) as isize, 0.0);
                                cnt.maxes += 1;
                                if v > m {
                                    m = v;
                                }
                            }
                            data.push(m);
                        }
                    }
                }
                Map { c: x.c, h: oh, w: ow, data }
            }
            (LayerKind::Dropout { .. }, _) => x,
            (LayerKind::Softmax, _) => {
                let mut m = x.data[0];
                for &v in &x.data[1..] {
                    cnt.maxes += 1;
                    if v > m {
                        m = v;
                    }
                }
                let mut e = Vec::with_capacity(x.data.len());
                for &v in &x.data {
                    cnt.adds += 1;
                    cnt.exps += 1;
                    e.push((v - m).exp());
                }
                let mut z = e[0];
                for &v in &e[1..] {
                    cnt.adds += 1;
                    z += v;
                }
                for v in e.iter_mut() {
                    cnt.mults += 1;
                    *v /= z;
                }
                let n = e.len();
                Map { c: n, h: 1, w: 1, data: e }
            }
            _ => return Err(Error::MissingParams(l.name.clone())),
        };
        layers.push(LayerOps {
            layer: l.name.clone(),
            kind: kind_name(&l.kind),
            counters: cnt,
        });
    }
    Ok((x.data, OpReport { layers }))
}

fn flatten_for(geom: Geometry, x: Map) -> Map {
    match geom {
        Geometry::Dense { .. } => Map {
            c: x.data.len(),
            h: 1,
            w: 1,
            data: x.data,
        },
        Geometry::Conv { .. } => x,
    }
}

/// Wall-clock statistics of single-image forward passes, in seconds.
///
/// Indicative only: these are timings of this implementation on the host,
/// not hardware latency figures.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeStats {
    pub reps: usize,
    pub median: f64,
    /// Sample standard deviation; absent for a single repetition.
    pub stddev: Option<f64>,
    pub min: f64,
    pub max: f64,
    /// Counts from one instrumented pass over the probe image.
    pub counters: OpReport,
}

/// Times `reps` eval-mode forward passes of a fixed pseudo-random image.
pub fn runtime_probe(net: &NetworkSpec, input_shape: [usize; 3], reps: usize) -> Result<ProbeStats> {
    if reps == 0 {
        return Err(Error::Invalid("reps must be at least 1".into()));
    }
    if input_shape != net.input_shape() {
        return Err(Error::shape(
            "runtime_probe",
            format!("probe shape {input_shape:?} differs from network input {:?}", net.input_shape()),
        ));
    }
    let [c, h, w] = input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image: Vec<f64> = (0..c * h * w).map(|_| rng.gen()).collect();
    let batch = Tensor::new(&[1, c, h, w], image.clone())?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        std::hint::black_box(net.forward(batch.clone(), Mode::Eval, &mut rng)?);
        times.push(t0.elapsed().as_secs_f64());
    }
    let (_, counters) = instrumented_forward(net, &image)?;
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        sorted[reps / 2]
    } else {
        0.5 * (sorted[reps / 2 - 1] + sorted[reps / 2])
    };
    let stddev = (reps > 1).then(|| {
        let mean = times.iter().sum::<f64>() / reps as f64;
        (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
    });
    Ok(ProbeStats {
        reps,
        median,
        stddev,
        min: sorted[0],
        max: sorted[reps - 1],
        counters,
    })
}
