//! Closed-form complexity model. Evaluates the per-round communication,
//! computation, and storage term counts for the submodel scheme, the
//! full-model baseline, and the set-union subprotocol, at both roles.
//! These are trend predictors (no constant factors), meant for comparing
//! shapes against measured metrics.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostScheme {
    Sfsl,
    Sfl,
    Psu,
}

#[derive(Debug, Clone, Copy)]
pub struct CostModelInput {
    /// Chosen clients per round.
    pub n: f64,
    /// Expected real index set cardinality per client.
    pub s: f64,
    /// Full index domain size.
    pub m: f64,
    /// Parameter columns.
    pub d: f64,
    pub p5: f64,
    pub p6: f64,
    pub role: Role,
    pub scheme: CostScheme,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostEstimate {
    pub comm_terms: f64,
    pub comp_terms: f64,
    pub storage_terms: f64,
    pub comm_formula: String,
    pub comp_formula: String,
    pub storage_formula: String,
}

/// Expected perturbed-set cardinality `s p5 + (n-1) s p6`.
fn perturbed_size(i: &CostModelInput) -> f64 {
    i.s * i.p5 + (i.n - 1.0) * i.s * i.p6
}

pub fn predict_cost(i: &CostModelInput) -> CostEstimate {
    let (n, s, m, d) = (i.n, i.s, i.m, i.d);
    let q = perturbed_size(i);
    match (i.scheme, i.role) {
        (CostScheme::Sfsl, Role::Client) => CostEstimate {
            comm_terms: n * s + q * (2.0 * d + 1.0),
            comp_terms: n * n * s + n * q * (d + 1.0),
            storage_terms: n * s + q * (d + 1.0),
            comm_formula: "ns + (s p5 + (n-1) s p6)(2d+1)".into(),
            comp_formula: "n^2 s + n (s p5 + (n-1) s p6)(d+1)".into(),
            storage_formula: "ns + (s p5 + (n-1) s p6)(d+1)".into(),
        },
        (CostScheme::Sfsl, Role::Server) => CostEstimate {
            comm_terms: n * n * s + n * q * (2.0 * d + 1.0),
            comp_terms: n * n * n * s + n * n * q * (d + 1.0),
            storage_terms: n * n + n * s + q * (n + d + 1.0),
            comm_formula: "n^2 s + n (s p5 + (n-1) s p6)(2d+1)".into(),
            comp_formula: "n^3 s + n^2 (s p5 + (n-1) s p6)(d+1)".into(),
            storage_formula: "n^2 + ns + (s p5 + (n-1) s p6)(n+d+1)".into(),
        },
        (CostScheme::Sfl, Role::Client) => CostEstimate {
            comm_terms: n + m * d,
            comp_terms: n * n + n * m * d,
            storage_terms: n + m * d,
            comm_formula: "n + md".into(),
            comp_formula: "n^2 + nmd".into(),
            storage_formula: "n + md".into(),
        },
        (CostScheme::Sfl, Role::Server) => CostEstimate {
            comm_terms: n * n + n * m * d,
            comp_terms: n * n * m * d,
            storage_terms: n * n + m * d,
            comm_formula: "n^2 + nmd".into(),
            comp_formula: "n^2 md".into(),
            storage_formula: "n^2 + md".into(),
        },
        (CostScheme::Psu, Role::Client) => CostEstimate {
            comm_terms: n * s,
            comp_terms: n * n * s,
            storage_terms: n * s,
            comm_formula: "ns".into(),
            comp_formula: "n^2 s".into(),
            storage_formula: "ns".into(),
        },
        (CostScheme::Psu, Role::Server) => CostEstimate {
            comm_terms: n * n * s,
            comp_terms: n * n * n * s,
            storage_terms: n * n + n * s,
            comm_formula: "n^2 s".into(),
            comp_formula: "n^3 s".into(),
            storage_formula: "n^2 + ns".into(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: f64, scheme: CostScheme, role: Role) -> CostModelInput {
        CostModelInput {
            n,
            s: 100.0,
            m: 20_000.0,
            d: 18.0,
            p5: 1.0,
            p6: 1.0,
            role,
            scheme,
        }
    }

    #[test]
    fn sfsl_client_comm_at_full_probability() {
        // p5 = p6 = 1 collapses to ns + ns(2d+1).
        let i = input(10.0, CostScheme::Sfsl, Role::Client);
        let want = 10.0 * 100.0 + 10.0 * 100.0 * (2.0 * 18.0 + 1.0);
        assert_eq!(predict_cost(&i).comm_terms, want);
    }

    #[test]
    fn sfl_client_comm_terms() {
        let i = input(10.0, CostScheme::Sfl, Role::Client);
        assert_eq!(predict_cost(&i).comm_terms, 10.0 + 20_000.0 * 18.0);
    }

    #[test]
    fn doubling_n_roughly_doubles_sfsl_client_comm() {
        for n in [20.0, 40.0, 80.0] {
            let a = predict_cost(&input(n, CostScheme::Sfsl, Role::Client)).comm_terms;
            let b = predict_cost(&input(2.0 * n, CostScheme::Sfsl, Role::Client)).comm_terms;
            let ratio = b / a;
            assert!((1.9..=2.1).contains(&ratio), "n={n}: ratio {ratio}");
        }
    }

    #[test]
    fn psu_client_is_linear_in_n() {
        let a = predict_cost(&input(20.0, CostScheme::Psu, Role::Client)).comm_terms;
        let b = predict_cost(&input(40.0, CostScheme::Psu, Role::Client)).comm_terms;
        assert_eq!(b, 2.0 * a);
    }
}
