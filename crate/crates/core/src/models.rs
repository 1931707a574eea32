//! Builtin models as operation graphs, each with an independent closed-form reference.
//!
//! * `toy2d`: f = cos(u1) + exp(-u2), u ~ N(0,1)^2.
//! * `two_solver_3d`: f1 = F1(u1, u2) solving x = 0.5 cos(x u1) + 0.3 u2;
//!   f = exp(-u3) f1 + f1^2, u ~ N(0,1)^3.
//! * `uav4d`: stored energy of a laser-powered UAV over one orbit,
//!   inputs (W_p, sigma, h, v).
//! * `airtaxi6d`: coupled trajectory block followed by an acoustic surrogate,
//!   inputs (v0, gamma0, h0, beta1, beta2, beta3).
//!
//! ## uav4d
//!
//! Constants: orbit radius r = 1000 m, g = 9.81 m/s^2, transmitted power P_tra = 50 kW,
//! orbit time t = 2 pi r / v.
//!
//! ```text
//! R     = sqrt(h^2 + r^2) / 1000                (slant range, km)
//! eta   = exp(-sigma R),  P_rec = eta P_tra
//! rho   = 1.225 exp(-h / 8500),  q = rho v^2 / 2
//! W_e   = 150 + 0.02 q + 8 sqrt(W_e)            (empty mass, solved iteratively)
//! D     = 0.03 q + (W_e + W_p)^2 / (q S / (K g^2)),  S = 2, K = 0.05
//! n     = sqrt((v / (r g))^2 + 1),  P_req = D / n
//! E     = (P_rec - P_req) t
//! ```
//!
//! The empty-mass solve carries cost 150 so that the payload and extinction inputs come out
//! sparse (about 3.9% and 3.4%) while h and v stay dense.
//!
//! ## airtaxi6d
//!
//! ```text
//! y = 0.006 v0^2 + gamma0 + 2 sqrt(y) (1 + 0.002 h0)     (solved iteratively, cost 200)
//! f = beta1 y^2 + beta2 log(1 + y) + beta3
//! ```

use std::f64::consts::PI;

use crate::graph::{Arg, ComputeGraph, FixedPointSpec, GraphBuilder, OpKind};
use crate::orthopoly::Distribution;

/// Inner tolerance and iteration cap used by builtin fixed-point nodes.
pub const BUILTIN_FP_TOL: f64 = 1e-15;
pub const BUILTIN_FP_MAX_ITER: u32 = 300;

pub const UAV_SOLVER_COST: u64 = 150;
pub const AIRTAXI_SOLVER_COST: u64 = 200;

#[derive(Debug, Clone)]
pub struct BuiltinModel {
    pub name: &'static str,
    pub graph: ComputeGraph,
    pub distributions: Vec<Distribution>,
    /// Inputs expected to fall below the 5% sparsity threshold with default costs.
    pub expected_sparse: Vec<usize>,
    pub reference: fn(&[f64]) -> f64,
}

impl BuiltinModel {
    pub fn input_names(&self) -> &[String] {
        self.graph.inputs()
    }
}

pub const BUILTIN_NAMES: [&str; 4] = ["toy2d", "two_solver_3d", "uav4d", "airtaxi6d"];

pub fn builtin(name: &str) -> Option<BuiltinModel> {
    match name {
        "toy2d" => Some(toy2d()),
        "two_solver_3d" => Some(two_solver_3d()),
        "uav4d" => Some(uav4d()),
        "airtaxi6d" => Some(airtaxi6d()),
        _ => None,
    }
}

pub fn all_builtins() -> Vec<BuiltinModel> {
    BUILTIN_NAMES.iter().filter_map(|n| builtin(n)).collect()
}

fn std_normal() -> Distribution {
    Distribution::Normal {
        mean: 0.0,
        std: 1.0,
    }
}

fn fixed_point(body: ComputeGraph, init: f64) -> OpKind {
    OpKind::FixedPoint(Box::new(FixedPointSpec {
        body,
        tol: BUILTIN_FP_TOL,
        max_iter: BUILTIN_FP_MAX_ITER,
        init,
    }))
}

pub fn toy2d() -> BuiltinModel {
    let mut b = GraphBuilder::new(&["u1", "u2"]);
    let x1 = b.op("xi1", OpKind::Cos, &[b.input(0)]);
    let x2 = b.op("xi2", OpKind::Neg, &[b.input(1)]);
    let x3 = b.op("xi3", OpKind::Exp, &[x2]);
    let f = b.op("f", OpKind::Add, &[x1, x3]);
    BuiltinModel {
        name: "toy2d",
        graph: b.finish(f).expect("toy graph is valid"),
        distributions: vec![std_normal(); 2],
        expected_sparse: vec![],
        reference: |u| u[0].cos() + (-u[1]).exp(),
    }
}

pub fn two_solver_3d() -> BuiltinModel {
    // body inputs: state x, then u1, u2
    let mut s = GraphBuilder::new(&["x", "u1", "u2"]);
    let xu = s.op("xu", OpKind::Mul, &[s.input(0), s.input(1)]);
    let c = s.op("cos_xu", OpKind::Cos, &[xu]);
    let a = s.op("half_cos", OpKind::Scale(0.5), &[c]);
    let bu = s.op("shift", OpKind::Scale(0.3), &[s.input(2)]);
    let g = s.op("g", OpKind::Add, &[a, bu]);
    let body = s.finish(g).expect("solver body is valid");

    let mut b = GraphBuilder::new(&["u1", "u2", "u3"]);
    let f1 = b.op("F1", fixed_point(body, 0.0), &[b.input(0), b.input(1)]);
    let nu = b.op("neg_u3", OpKind::Neg, &[b.input(2)]);
    let e = b.op("exp_u3", OpKind::Exp, &[nu]);
    let p = b.op("coupling", OpKind::Mul, &[e, f1]);
    let sq = b.op("f1_sq", OpKind::Power(2.0), &[f1]);
    let f = b.op("F2", OpKind::Add, &[p, sq]);
    BuiltinModel {
        name: "two_solver_3d",
        graph: b.finish(f).expect("two-solver graph is valid"),
        distributions: vec![std_normal(); 3],
        expected_sparse: vec![],
        reference: two_solver_reference,
    }
}

/// Newton's method on `x - 0.5 cos(x u1) - 0.3 u2`, independent of the graph's damped
/// iteration.
pub fn two_solver_f1(u1: f64, u2: f64) -> f64 {
    let mut x = 0.3 * u2;
    for _ in 0..100 {
        let h = x - 0.5 * (x * u1).cos() - 0.3 * u2;
        let dh = 1.0 + 0.5 * u1 * (x * u1).sin();
        let step = h / dh;
        x -= step;
        if step.abs() <= 1e-16 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

fn two_solver_reference(u: &[f64]) -> f64 {
    let f1 = two_solver_f1(u[0], u[1]);
    (-u[2]).exp() * f1 + f1 * f1
}

pub mod uav {
    //! Closed-form pieces of the uav4d model.
    use super::PI;

    pub const ORBIT_RADIUS: f64 = 1000.0;
    pub const GRAVITY: f64 = 9.81;
    pub const P_TRA: f64 = 50_000.0;
    pub const WING_AREA: f64 = 2.0;
    pub const CD0: f64 = 0.015;
    pub const INDUCED_K: f64 = 0.05;
    pub const SCALE_HEIGHT: f64 = 8500.0;

    /// Slant range in km.
    pub fn slant_range(h: f64) -> f64 {
        (h * h + ORBIT_RADIUS * ORBIT_RADIUS).sqrt() / 1000.0
    }

    pub fn received_power(sigma: f64, h: f64) -> f64 {
        (-sigma * slant_range(h)).exp() * P_TRA
    }

    pub fn load_factor(v: f64) -> f64 {
        ((v / (ORBIT_RADIUS * GRAVITY)).powi(2) + 1.0).sqrt()
    }

    pub fn orbit_time(v: f64) -> f64 {
        2.0 * PI * ORBIT_RADIUS / v
    }

    pub fn dynamic_pressure(h: f64, v: f64) -> f64 {
        0.5 * 1.225 * (-h / SCALE_HEIGHT).exp() * v * v
    }

    /// Positive root of `s^2 - 8 s - (150 + 0.02 q) = 0`, squared.
    pub fn empty_mass(q: f64) -> f64 {
        let s = 4.0 + (16.0 + 150.0 + 0.02 * q).sqrt();
        s * s
    }

    pub fn drag(w_p: f64, h: f64, v: f64) -> f64 {
        let q = dynamic_pressure(h, v);
        let w = empty_mass(q) + w_p;
        q * WING_AREA * CD0 + INDUCED_K * GRAVITY * GRAVITY * w * w / (q * WING_AREA)
    }

    pub fn energy(u: &[f64]) -> f64 {
        let (w_p, sigma, h, v) = (u[0], u[1], u[2], u[3]);
        let p_req = drag(w_p, h, v) / load_factor(v);
        (received_power(sigma, h) - p_req) * orbit_time(v)
    }
}

pub fn uav4d() -> BuiltinModel {
    use uav::*;
    // empty-mass body: inputs x, q
    let mut s = GraphBuilder::new(&["x", "q"]);
    let sx = s.op("sqrt_x", OpKind::Sqrt, &[s.input(0)]);
    let a = s.op("growth", OpKind::Scale(8.0), &[sx]);
    let bq = s.op("structure", OpKind::Scale(0.02), &[s.input(1)]);
    let c = s.op("sum", OpKind::Add, &[a, bq]);
    let g = s.op("g", OpKind::Offset(150.0), &[c]);
    let body = s.finish(g).expect("empty-mass body is valid");

    let mut b = GraphBuilder::new(&["W_p", "sigma", "h", "v"]);
    let (w_p, sigma, h, v) = (b.input(0), b.input(1), b.input(2), b.input(3));
    // laser link
    let h2 = b.op("h_sq", OpKind::Power(2.0), &[h]);
    let hr = b.op(
        "range_sq",
        OpKind::Offset(ORBIT_RADIUS * ORBIT_RADIUS),
        &[h2],
    );
    let rm = b.op("range_m", OpKind::Sqrt, &[hr]);
    let rk = b.op("R", OpKind::Scale(1e-3), &[rm]);
    let sr = b.op("sigma_R", OpKind::Mul, &[sigma, rk]);
    let nsr = b.op("neg_sigma_R", OpKind::Neg, &[sr]);
    let eta = b.op("eta", OpKind::Exp, &[nsr]);
    let p_rec = b.op("P_rec", OpKind::Scale(P_TRA), &[eta]);
    // atmosphere and dynamic pressure
    let hs = b.op("h_scaled", OpKind::Scale(-1.0 / SCALE_HEIGHT), &[h]);
    let re = b.op("rho_ratio", OpKind::Exp, &[hs]);
    let rho = b.op("rho", OpKind::Scale(1.225), &[re]);
    let v2 = b.op("v_sq", OpKind::Power(2.0), &[v]);
    let q0 = b.op("rho_v_sq", OpKind::Mul, &[rho, v2]);
    let q = b.op("q", OpKind::Scale(0.5), &[q0]);
    let d0 = b.op("D0", OpKind::Scale(WING_AREA * CD0), &[q]);
    let w_e = b.op_with_cost("W_e", fixed_point(body, 300.0), &[q], UAV_SOLVER_COST);
    // performance
    let wt = b.op("W_total", OpKind::Add, &[w_e, w_p]);
    let w2 = b.op("W_sq", OpKind::Power(2.0), &[wt]);
    let qs = b.op(
        "q_S_eff",
        OpKind::Scale(WING_AREA / (INDUCED_K * GRAVITY * GRAVITY)),
        &[q],
    );
    let di = b.op("D_induced", OpKind::Div, &[w2, qs]);
    let d = b.op("D", OpKind::Add, &[d0, di]);
    let vr = b.op(
        "v_ratio",
        OpKind::Scale(1.0 / (ORBIT_RADIUS * GRAVITY)),
        &[v],
    );
    let vr2 = b.op("v_ratio_sq", OpKind::Power(2.0), &[vr]);
    let n2 = b.op("n_sq", OpKind::Offset(1.0), &[vr2]);
    let n = b.op("n", OpKind::Sqrt, &[n2]);
    let p_req = b.op("P_req", OpKind::Div, &[d, n]);
    let circ = b.op("circumference", OpKind::Const(2.0 * PI * ORBIT_RADIUS), &[]);
    let t = b.op("t", OpKind::Div, &[circ, v]);
    let net = b.op("P_net", OpKind::Sub, &[p_rec, p_req]);
    let e = b.op("E", OpKind::Mul, &[net, t]);
    BuiltinModel {
        name: "uav4d",
        graph: b.finish(e).expect("uav graph is valid"),
        distributions: vec![
            Distribution::Normal {
                mean: 90.0,
                std: 10.0,
            },
            Distribution::Normal {
                mean: 0.2,
                std: 0.02,
            },
            Distribution::Normal {
                mean: 10_000.0,
                std: 1000.0,
            },
            Distribution::Normal {
                mean: 100.0,
                std: 10.0,
            },
        ],
        expected_sparse: vec![0, 1],
        reference: uav::energy,
    }
}

/// Closed-form fixed point of the airtaxi coupling block.
pub fn airtaxi_state(v0: f64, gamma0: f64, h0: f64) -> f64 {
    let b = 0.006 * v0 * v0 + gamma0;
    let c = 2.0 * (1.0 + 0.002 * h0);
    let s = 0.5 * (c + (c * c + 4.0 * b).sqrt());
    s * s
}

fn airtaxi_reference(u: &[f64]) -> f64 {
    let y = airtaxi_state(u[0], u[1], u[2]);
    u[3] * y * y + u[4] * (1.0 + y).ln() + u[5]
}

pub fn airtaxi6d() -> BuiltinModel {
    // body inputs: state y, then v0, gamma0, h0
    let mut s = GraphBuilder::new(&["y", "v0", "gamma0", "h0"]);
    let v2 = s.op("v0_sq", OpKind::Power(2.0), &[s.input(1)]);
    let a = s.op("thrust_term", OpKind::Scale(0.006), &[v2]);
    let bb = s.op("climb_term", OpKind::Add, &[a, s.input(2)]);
    let sy = s.op("sqrt_y", OpKind::Sqrt, &[s.input(0)]);
    let hh = s.op("h_term", OpKind::Scale(0.002), &[s.input(3)]);
    let hf = s.op("h_factor", OpKind::Offset(1.0), &[hh]);
    let c = s.op("coupled", OpKind::Mul, &[sy, hf]);
    let c2 = s.op("coupled_2", OpKind::Scale(2.0), &[c]);
    let g = s.op("g", OpKind::Add, &[bb, c2]);
    let body = s.finish(g).expect("coupling body is valid");

    let mut b = GraphBuilder::new(&["v0", "gamma0", "h0", "beta1", "beta2", "beta3"]);
    let args: Vec<Arg> = (0..3).map(|j| b.input(j)).collect();
    let y = b.op_with_cost(
        "trajectory",
        fixed_point(body, 10.0),
        &args,
        AIRTAXI_SOLVER_COST,
    );
    let y2 = b.op("y_sq", OpKind::Power(2.0), &[y]);
    let t1 = b.op("tonal", OpKind::Mul, &[b.input(3), y2]);
    let l = b.op("one_plus_y", OpKind::Offset(1.0), &[y]);
    let ll = b.op("log_y", OpKind::Log, &[l]);
    let t2 = b.op("broadband", OpKind::Mul, &[b.input(4), ll]);
    let sum = b.op("partial", OpKind::Add, &[t1, t2]);
    let f = b.op("noise", OpKind::Add, &[sum, b.input(5)]);
    BuiltinModel {
        name: "airtaxi6d",
        graph: b.finish(f).expect("airtaxi graph is valid"),
        distributions: vec![
            Distribution::Uniform {
                lower: 30.0,
                upper: 35.0,
            },
            Distribution::Uniform {
                lower: 0.0,
                upper: 2.0,
            },
            Distribution::Uniform {
                lower: 0.0,
                upper: 20.0,
            },
            Distribution::Normal {
                mean: 0.0209,
                std: 0.001,
            },
            Distribution::Normal {
                mean: 18.2429,
                std: 0.5,
            },
            Distribution::Normal {
                mean: 6.729,
                std: 0.2,
            },
        ],
        expected_sparse: vec![3, 4, 5],
        reference: airtaxi_reference,
    }
}
