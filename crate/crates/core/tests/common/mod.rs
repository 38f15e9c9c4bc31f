#![allow(dead_code)]

use std::path::Path;

use prfl::data::SyntheticSpec;
use prfl::nn::{ModelParams, Tape};
use prfl::synkd::record_losses;
use prfl::nn::BoundModel;
use prfl::{ExperimentConfig, Tensor};

pub const LOSS_NAMES: [&str; 8] = ["l_cor", "l_task_t", "l_task_s", "l_lrl", "l_d_t", "l_d_s", "l_bik_t", "l_bik_s"];

/// Small federations that finish in well under a second.
pub fn tiny_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.rounds = 3;
    cfg.clients = 6;
    cfg.participation_ratio = 0.5;
    cfg.model.hidden = 8;
    cfg.dataset.synthetic = SyntheticSpec { num_classes: 4, dims: vec![6], n_per_class: 30, spread: 1.0, separation: 1.0 };
    cfg.dpd.min_compress_elems = 32;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

/// Drops the trailing `wall_ms` column.
pub fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

// Plain-loop reference for the mlp losses. Quantities that the training
// graph treats as constants are passed in as `Frozen`.

pub struct MlpOut {
    pub hidden: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

pub fn mlp_forward(p: &ModelParams, x: &[Vec<f64>]) -> MlpOut {
    let (w1, b1) = (p.get("backbone.w").unwrap(), p.get("backbone.b").unwrap());
    let (w2, b2) = (p.get("head.w").unwrap(), p.get("head.b").unwrap());
    let (d, n) = (w1.dims()[0], w1.dims()[1]);
    let c = w2.dims()[0];
    let mut hidden = Vec::new();
    let mut probs = Vec::new();
    for row in x {
        let h: Vec<f64> = (0..d)
            .map(|j| (b1.data()[j] + (0..n).map(|i| w1.data()[j * n + i] * row[i]).sum::<f64>()).tanh())
            .collect();
        let z: Vec<f64> = (0..c).map(|k| b2.data()[k] + (0..d).map(|j| w2.data()[k * d + j] * h[j]).sum::<f64>()).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        probs.push(e.iter().map(|v| v / s).collect());
        hidden.push(h);
    }
    MlpOut { hidden, probs }
}

const EPS: f64 = 1e-12;

pub fn ce(probs: &[Vec<f64>], y: &[usize]) -> f64 {
    probs.iter().zip(y).map(|(p, &t)| -p[t].max(EPS).ln()).sum::<f64>() / y.len() as f64
}

pub fn cor(hs: &[Vec<f64>], ht: &[Vec<f64>], w: &Tensor) -> f64 {
    let d = w.dims()[0];
    let mut acc = 0.0;
    for (a, b) in hs.iter().zip(ht) {
        for k in 0..d {
            let v: f64 = (0..d).map(|j| (a[j] - b[j]) * w.data()[j * d + k]).sum();
            acc += v * v;
        }
    }
    acc / (hs.len() * d) as f64
}

pub fn kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * (x.max(EPS) / y.max(EPS)).ln()).sum::<f64>())
        .sum::<f64>()
        / p.len() as f64
}

pub struct Frozen {
    pub den: f64,
    pub teacher: MlpOut,
    pub student: MlpOut,
}

pub fn freeze(t: &ModelParams, s: &ModelParams, x: &[Vec<f64>], y: &[usize]) -> Frozen {
    let teacher = mlp_forward(t, x);
    let student = mlp_forward(s, x);
    let den = ce(&teacher.probs, y) + ce(&student.probs, y) + 1e-8;
    Frozen { den, teacher, student }
}

pub fn reference_loss(name: &str, t: &ModelParams, s: &ModelParams, w: &Tensor, x: &[Vec<f64>], y: &[usize], f: &Frozen) -> f64 {
    let to = mlp_forward(t, x);
    let so = mlp_forward(s, x);
    match name {
        "l_cor" => cor(&so.hidden, &to.hidden, w),
        "l_task_t" => ce(&to.probs, y),
        "l_task_s" => ce(&so.probs, y),
        "l_lrl" => cor(&so.hidden, &to.hidden, w) / f.den,
        "l_d_t" => kl(&to.probs, &f.student.probs) / f.den,
        "l_d_s" => kl(&so.probs, &f.teacher.probs) / f.den,
        "l_bik_t" => {
            kl(&to.probs, &f.student.probs) / f.den + cor(&f.student.hidden, &to.hidden, w) / f.den + ce(&to.probs, y)
        }
        "l_bik_s" => {
            kl(&so.probs, &f.teacher.probs) / f.den + cor(&so.hidden, &f.teacher.hidden, w) / f.den + ce(&so.probs, y)
        }
        other => panic!("unknown loss {other}"),
    }
}

/// Which parameter a gradient coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Teacher,
    Student,
    Aux,
}

pub struct GradReport {
    pub loss: &'static str,
    pub max_rel_err: f64,
    pub coords: usize,
}

/// `|a − f| / max(|a|, |f|, floor)`.
pub fn rel_err(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor)
}

/// Analytic tape gradients of every loss against central differences of the
/// reference, over all teacher, student and `W_aux` coordinates.
pub fn gradient_check(
    t: &ModelParams,
    s: &ModelParams,
    w: &Tensor,
    x: &Tensor,
    y: &[usize],
    h: f64,
    floor: f64,
) -> Vec<GradReport> {
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
    let frozen = freeze(t, s, &rows, y);
    let mut out = Vec::new();
    for name in LOSS_NAMES {
        let mut tape = Tape::new();
        let tb = BoundModel::bind(&mut tape, t);
        let sb = BoundModel::bind(&mut tape, s);
        let wv = tape.leaf(w.clone());
        let xv = tape.leaf(x.clone());
        let lv = record_losses(&mut tape, &tb, &sb, wv, xv, y).unwrap();
        let node = match name {
            "l_cor" => lv.l_cor,
            "l_task_t" => lv.l_task_t,
            "l_task_s" => lv.l_task_s,
            "l_lrl" => lv.l_lrl,
            "l_d_t" => lv.l_d_t,
            "l_d_s" => lv.l_d_s,
            "l_bik_t" => lv.l_bik_t,
            _ => lv.l_bik_s,
        };
        let value = tape.scalar(node);
        let reference = reference_loss(name, t, s, w, &rows, y, &frozen);
        assert!(
            (value - reference).abs() <= 1e-12 * value.abs().max(1.0),
            "{name}: tape value {value} vs reference {reference}"
        );
        let g = tape.backward(node);
        let (gt, gs, gw) = (tb.grads(&g), sb.grads(&g), g.wrt(wv));

        let mut worst: f64 = 0.0;
        let mut coords = 0;
        for owner in [Owner::Teacher, Owner::Student, Owner::Aux] {
            let names: Vec<String> = match owner {
                Owner::Aux => vec![String::new()],
                _ => t.names().map(str::to_string).collect(),
            };
            for pname in &names {
                let len = match owner {
                    Owner::Aux => w.len(),
                    _ => t.get(pname).unwrap().len(),
                };
                for i in 0..len {
                    let eval = |delta: f64| {
                        let (mut t2, mut s2, mut w2) = (t.clone(), s.clone(), w.clone());
                        match owner {
                            Owner::Teacher => t2.get_mut(pname).unwrap().data_mut()[i] += delta,
                            Owner::Student => s2.get_mut(pname).unwrap().data_mut()[i] += delta,
                            Owner::Aux => w2.data_mut()[i] += delta,
                        }
                        reference_loss(name, &t2, &s2, &w2, &rows, y, &frozen)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = match owner {
                        Owner::Teacher => gt[pname.as_str()].data()[i],
                        Owner::Student => gs[pname.as_str()].data()[i],
                        Owner::Aux => gw.data()[i],
                    };
                    worst = worst.max(rel_err(an, fd, floor));
                    coords += 1;
                }
            }
        }
        out.push(GradReport { loss: name, max_rel_err: worst, coords });
    }
    out
}
