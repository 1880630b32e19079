//! Certification of a model against the naive oracles.

use std::fmt;

use anyhow::{bail, Result};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sopa::automata::score_vectors;
use sopa::classifier::{gradient_check, jitter_parameters, ModelBundle};
use sopa::embeddings::{Embeddings, TokenizedDocument};
use sopa::reference::{
    brute_force_doc_score, cnn_filter, explicit_cnn_score, relative_deviation, MAX_ENUM_DOC,
};

pub struct OracleSettings {
    pub tolerance: f64,
    pub grad_tolerance: f64,
    pub jitter: f64,
    pub seed: u64,
}

pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        })
    }
}

pub struct CheckLine {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

pub struct OracleReport {
    pub lines: Vec<CheckLine>,
    pub skipped_docs: usize,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        !self.lines.iter().any(|l| matches!(l.status, Status::Fail))
    }
}

fn check(name: &'static str, ok: bool, detail: String) -> CheckLine {
    CheckLine {
        name,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

pub fn run(
    model: &ModelBundle,
    digest_ok: bool,
    docs: &[TokenizedDocument],
    embeddings: &Embeddings,
    settings: &OracleSettings,
) -> Result<OracleReport> {
    if docs.is_empty() {
        bail!("no documents to check");
    }
    model.check_compatible(embeddings)?;
    let mut lines = vec![check(
        "digest",
        digest_ok,
        if digest_ok {
            "parameters match the stored digest".into()
        } else {
            "parameters do not match the stored digest".into()
        },
    )];

    let mut usable = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if d.len() > MAX_ENUM_DOC {
            warn!("document {i} has {} tokens, over the oracle bound of {MAX_ENUM_DOC}; skipped", d.len());
        } else {
            usable.push(d);
        }
    }
    let skipped_docs = docs.len() - usable.len();
    if usable.is_empty() {
        bail!("every document exceeds the oracle bound of {MAX_ENUM_DOC} tokens");
    }

    let config = &model.config;
    let mut worst = 0.0f64;
    let mut compared = 0;
    let mut cnn_worst = 0.0f64;
    for d in &usable {
        let vectors = embeddings.matrix.document_vectors(d);
        for pattern in &model.patterns {
            let fast = score_vectors(pattern, &vectors, config)?.score;
            let slow = brute_force_doc_score(pattern, &vectors, config)?;
            worst = worst.max(nan_as_inf(relative_deviation(fast, slow)));
            compared += 1;
            if config.is_cnn_mode() {
                let (filter, biases) = cnn_filter(pattern);
                let cnn = explicit_cnn_score(&filter, &biases, &vectors)?;
                cnn_worst = cnn_worst.max(nan_as_inf(relative_deviation(fast, cnn)));
            }
        }
    }
    lines.push(check(
        "recurrence",
        worst <= settings.tolerance,
        format!("max deviation {worst:.3e} over {compared} pattern-document pairs"),
    ));
    lines.push(if config.is_cnn_mode() {
        check(
            "cnn",
            cnn_worst <= settings.tolerance,
            format!("max deviation {cnn_worst:.3e}"),
        )
    } else {
        CheckLine {
            name: "cnn",
            status: Status::Skip,
            detail: "model is not in CNN mode".into(),
        }
    });

    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    jitter_parameters(&mut probe, settings.jitter, &mut rng);
    let mut labeled = Vec::new();
    for d in &usable {
        match d.label {
            Some(l) if l < model.num_labels => {
                let finite = probe
                    .encode(&embeddings.matrix.document_vectors(d))
                    .is_ok();
                if finite {
                    labeled.push((*d).clone());
                } else {
                    warn!("document with a non-finite pattern score left out of the gradient check");
                }
            }
            Some(l) => bail!("label {l} is outside the model's {} classes", model.num_labels),
            None => bail!("gradient check needs labeled documents"),
        }
    }
    lines.push(if labeled.is_empty() {
        CheckLine {
            name: "gradient",
            status: Status::Skip,
            detail: "no document with finite pattern scores".into(),
        }
    } else {
        let report = gradient_check(&probe, &labeled, embeddings, 3)?;
        let mut detail = format!(
            "max relative error {:.3e} over {} parameters",
            report.max_rel_error, report.checked
        );
        let layout = probe.layout();
        for w in &report.worst {
            detail.push_str(&format!(
                "\n    {}: analytic {:.6e} numeric {:.6e}",
                layout.describe(w.index),
                w.analytic,
                w.numeric
            ));
        }
        check("gradient", report.max_rel_error < settings.grad_tolerance, detail)
    });
    Ok(OracleReport {
        lines,
        skipped_docs,
    })
}

fn nan_as_inf(x: f64) -> f64 {
    if x.is_nan() {
        f64::INFINITY
    } else {
        x
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{:<11} {}  {}", l.name, l.status, l.detail)?;
        }
        writeln!(f, "skipped documents: {}", self.skipped_docs)?;
        writeln!(f, "overall {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}
