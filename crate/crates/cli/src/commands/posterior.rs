use std::io::Write;

use fomemo::benchmarks::{sobol_points, to_native};
use fomemo::metrics::normalize_trajectory;
use fomemo::scalarize::Preference;

use super::PosteriorArgs;
use crate::error::{CliError, Result};
use crate::runs::{load_model, ProblemSpec};

pub const POSTERIOR_HEADER: &str = "pref_index,lambda,x,mean,std,ucb";

/// `w1,w2;w1,w2;...`, each of length `m`.
pub fn parse_preferences(text: &str, m: usize) -> Result<Vec<Preference>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|group| {
            let w: Vec<f64> = group
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| CliError::Config(format!("preference `{group}`: {e}"))))
                .collect::<Result<_>>()?;
            if w.len() != m {
                return Err(CliError::Config(format!("preference `{group}` has {} weights, problem has {m} objectives", w.len())));
            }
            Ok(Preference::new(&w)?)
        })
        .collect()
}

/// Five preferences spread over the simplex edge between the first two
/// objectives (every other weight zero).
fn default_preferences(m: usize) -> Result<Vec<Preference>> {
    [0.1, 0.3, 0.5, 0.7, 0.9]
        .iter()
        .map(|&a| {
            let mut w = vec![0.0; m];
            w[0] = a;
            if m > 1 {
                w[1] = 1.0 - a;
            }
            Ok(Preference::new(&w)?)
        })
        .collect()
}

pub fn run(args: &PosteriorArgs) -> Result<()> {
    let p = &args.problem;
    let spec = ProblemSpec::new(&p.problem, p.dim, p.objectives, p.bounds)?;
    if spec.dim != 1 {
        return Err(fomemo::Error::DimensionMismatch { expected: 1, got: spec.dim }.into());
    }
    if args.n_traj == 0 || args.grid == 0 {
        return Err(CliError::Config("--n-traj and --grid must be at least 1".into()));
    }
    let model = load_model(&args.ckpt)?;
    let mut problem = spec.open()?;
    let bounds = problem.bounds().to_vec();
    let m = problem.n_objectives();
    let prefs = match &args.preferences {
        Some(text) => parse_preferences(text, m)?,
        None => default_preferences(m)?,
    };
    let xs = sobol_points(1, args.n_traj, args.seed)?;
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| problem.evaluate(&to_native(&bounds, x))).collect::<fomemo::Result<_>>()?;
    let (y_norm, _) = normalize_trajectory(&ys);
    let flat_x: Vec<f64> = xs.iter().flatten().copied().collect();
    let flat_y: Vec<f64> = y_norm.iter().flatten().copied().collect();
    let ctx = model.context(&flat_x, &flat_y, 1, m)?;
    let grid: Vec<f64> = if args.grid == 1 {
        vec![0.5]
    } else {
        (0..args.grid).map(|k| k as f64 / (args.grid - 1) as f64).collect()
    };

    let io = |e| CliError::io(&args.out, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&args.out).map_err(io)?);
    writeln!(f, "{POSTERIOR_HEADER}").map_err(io)?;
    for (i, pref) in prefs.iter().enumerate() {
        let qp: Vec<f64> = grid.iter().flat_map(|_| pref.weights().iter().copied()).collect();
        let hists = model.predict(&ctx, &grid, &qp)?;
        let lambda: Vec<String> = pref.weights().iter().map(|w| format!("{w}")).collect();
        for (x, h) in grid.iter().zip(&hists) {
            let s = h.stats();
            let native = to_native(&bounds, &[*x])[0];
            writeln!(f, "{i},{},{native},{},{},{}", lambda.join(";"), s.mean, s.std, s.mean + args.beta * s.std).map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preference_lists() {
        let p = parse_preferences("0.2,0.8; 0.5,0.5", 2).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p[0].weights()[1] - 0.8).abs() < 1e-5);
        assert!(parse_preferences("0.2,0.3,0.5", 2).is_err());
        assert!(parse_preferences("a,b", 2).is_err());
        assert_eq!(default_preferences(2).unwrap().len(), 5);
    }
}
