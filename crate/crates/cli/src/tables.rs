//! Plot-ready histogram and QQ tables.

use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

use spike_spectra::montecarlo::ExperimentReport;
use spike_spectra::{Error, Result};

pub const HISTOGRAM_BINS: usize = 50;

pub struct MarginalTables {
    pub name: String,
    /// `(histogram csv, qq csv)`; `None` when the marginal was not observed.
    pub content: Option<(String, String)>,
}

#[derive(Clone, Copy)]
enum Reference {
    Normal,
    ChiSquare1,
}

impl Reference {
    fn pdf(self, x: f64) -> f64 {
        match self {
            Reference::Normal => Normal::standard().pdf(x),
            Reference::ChiSquare1 if x <= 0.0 => 0.0,
            Reference::ChiSquare1 => ChiSquared::new(1.0).expect("valid").pdf(x),
        }
    }

    fn quantile(self, p: f64) -> f64 {
        match self {
            Reference::Normal => Normal::standard().inverse_cdf(p),
            Reference::ChiSquare1 => ChiSquared::new(1.0).expect("valid").inverse_cdf(p),
        }
    }
}

/// Predicted variance used to standardize a marginal, and its reference law.
fn standardization(report: &ExperimentReport, marginal: &str) -> Result<(f64, Reference)> {
    let first = report.directions.first().ok_or_else(|| Error::Config("report lists no directions".into()))?;
    if marginal == "Upsilon_hat" {
        return Ok((first.prediction.v_theorem[0][0], Reference::Normal));
    }
    for (prefix, slot, reference) in [
        ("Theta_hat_", 1, Reference::Normal),
        ("Lambda_signed_hat_", 2, Reference::Normal),
        ("Lambda_sq_hat_", 2, Reference::ChiSquare1),
    ] {
        if let Some(name) = marginal.strip_prefix(prefix) {
            let dir = report
                .directions
                .iter()
                .find(|d| d.name == name)
                .ok_or_else(|| Error::Config(format!("report has no direction {name}")))?;
            return Ok((dir.prediction.v_theorem[slot][slot], reference));
        }
    }
    Err(Error::Config(format!("unknown marginal {marginal}")))
}

/// 50-bin histogram of the standardized sample with the reference density.
fn histogram_csv(z: &[f64], reference: Reference) -> String {
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
    let mut counts = [0usize; HISTOGRAM_BINS];
    for x in z {
        let k = (((x - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[k] += 1;
    }
    let n = z.len() as f64;
    let mut out = String::from("bin_lower,bin_upper,count,density,reference_pdf\n");
    for (k, c) in counts.iter().enumerate() {
        let a = lo + k as f64 * width;
        let b = if k + 1 == HISTOGRAM_BINS { hi.max(a + width) } else { lo + (k + 1) as f64 * width };
        let pdf = reference.pdf(0.5 * (a + b));
        out.push_str(&format!("{a:e},{b:e},{c},{:e},{pdf:e}\n", *c as f64 / (n * width)));
    }
    out
}

/// Sorted sample against reference quantiles at `(k + 0.5) / n`.
fn qq_csv(z: &[f64], reference: Reference) -> String {
    let mut sorted = z.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out = String::from("probability,theoretical,empirical\n");
    for (k, x) in sorted.iter().enumerate() {
        let p = (k as f64 + 0.5) / n;
        out.push_str(&format!("{p:e},{:e},{x:e}\n", reference.quantile(p)));
    }
    out
}

pub fn plot_tables(report: &ExperimentReport) -> Result<Vec<MarginalTables>> {
    let mut tables = Vec::with_capacity(report.samples.len());
    for (name, sample) in &report.samples {
        if sample.is_empty() {
            tables.push(MarginalTables { name: name.clone(), content: None });
            continue;
        }
        let (var, reference) = standardization(report, name)?;
        if !(var > 0.0) {
            return Err(Error::DegenerateSample(format!("predicted variance of {name} is {var}")));
        }
        let z: Vec<f64> = match reference {
            Reference::Normal => sample.iter().map(|x| x / var.sqrt()).collect(),
            Reference::ChiSquare1 => sample.iter().map(|x| x / var).collect(),
        };
        tables.push(MarginalTables { name: name.clone(), content: Some((histogram_csv(&z, reference), qq_csv(&z, reference))) });
    }
    Ok(tables)
}
