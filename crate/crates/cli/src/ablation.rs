use crate::error::{CliError, CliResult};
use crate::pipeline::{bleu_lines, train_run, Corpus, SplitName, Translator};
use cmm_core::model::HgaMode;
use cmm_core::retrieval::Strategy;
use cmm_core::textcore::write_atomic;
use cmm_core::training::{sha256_hex, RunConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const VARIANTS: [&str; 7] = ["cmm", "t-greedy", "t-mmr", "t-random", "t-wo-hga", "t-wo-mtcl", "no-tm"];
pub const ALPHA_SWEEP: [f64; 6] = [0.0, 0.3, 0.5, 0.7, 0.9, 1.1];
pub const SIZE_SWEEP: [usize; 5] = [0, 1, 3, 5, 7];
pub const SWEEP_SIZE: usize = 5;
pub const SWEEP_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: String,
    pub alpha: f64,
    pub m_size: usize,
}

impl Cell {
    /// The base config with this cell's variant applied.
    pub fn configure(&self, base: &RunConfig) -> CliResult<RunConfig> {
        let mut run = base.clone();
        run.retrieval.alpha = self.alpha;
        run.retrieval.m_size = self.m_size;
        match self.variant.as_str() {
            "cmm" => {}
            "t-greedy" => run.retrieval.strategy = Strategy::Greedy,
            "t-mmr" => run.retrieval.strategy = Strategy::Mmr,
            "t-random" => run.retrieval.strategy = Strategy::Random,
            "t-wo-hga" => run.model.hga = HgaMode::Off,
            "t-wo-mtcl" => run.loss.lambda = 0.0,
            "no-tm" => run.retrieval.m_size = 0,
            v => return Err(CliError::usage(format!("unknown variant {v:?}"))),
        }
        Ok(run)
    }

    fn slug(&self) -> String {
        format!("{}-a{}-m{}", self.variant, self.alpha, self.m_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub cells: Vec<Cell>,
    pub seeds: Vec<u64>,
    pub split: SplitName,
}

impl AblationPlan {
    /// Variant grid at the configured α and |M|, optionally followed by
    /// the α and |M| sweeps of the full model. Duplicate cells are dropped.
    pub fn standard(base: &RunConfig, variants: &[&str], sweeps: bool, n_seeds: usize, split: SplitName) -> Self {
        let mut cells: Vec<Cell> = variants
            .iter()
            .map(|v| Cell {
                variant: v.to_string(),
                alpha: base.retrieval.alpha,
                m_size: if *v == "no-tm" { 0 } else { base.retrieval.m_size },
            })
            .collect();
        if sweeps {
            for &alpha in &ALPHA_SWEEP {
                cells.push(Cell {
                    variant: "cmm".into(),
                    alpha,
                    m_size: SWEEP_SIZE,
                });
            }
            for &m_size in &SIZE_SWEEP {
                cells.push(Cell {
                    variant: "cmm".into(),
                    alpha: SWEEP_ALPHA,
                    m_size,
                });
            }
        }
        let mut seen = Vec::new();
        cells.retain(|c| {
            let fresh = !seen.contains(c);
            if fresh {
                seen.push(c.clone());
            }
            fresh
        });
        AblationPlan {
            cells,
            seeds: (0..n_seeds as u64).map(|i| base.seed + i).collect(),
            split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub strategy: Strategy,
    pub hga: HgaMode,
    pub lambda: f64,
    /// One entry per seed; `None` where the run failed.
    pub bleu: Vec<Option<f64>>,
    pub errors: Vec<String>,
}

impl CellResult {
    pub fn mean(&self) -> Option<f64> {
        let ok: Vec<f64> = self.bleu.iter().flatten().copied().collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }
}

pub struct AblationReport {
    pub results: Vec<CellResult>,
    pub csv: PathBuf,
    pub outputs: Vec<PathBuf>,
}

impl AblationReport {
    pub fn mean_of(&self, variant: &str) -> Option<f64> {
        self.results.iter().find(|r| r.cell.variant == variant)?.mean()
    }
}

fn cache_key(run: &RunConfig) -> String {
    let mut v = serde_json::to_value(run).expect("config serializes");
    if let Some(m) = v.as_object_mut() {
        m.remove("paths");
    }
    sha256_hex(v.to_string().as_bytes())
}

fn run_cell(run: &RunConfig, dir: &Path, split: SplitName, corpus: &Corpus) -> CliResult<(f64, Vec<PathBuf>)> {
    let trained = train_run(run, dir)?;
    let tr = Translator::load(&trained.outcome.checkpoint)?;
    let hyps = tr.translate(corpus, split, run.decode.beam)?;
    let refs = corpus.reference_text(split)?;
    let hyp_path = dir.join(format!("{split}.hyp"));
    let mut text = hyps.join("\n");
    text.push('\n');
    write_atomic(&hyp_path, text.as_bytes())?;
    let b = bleu_lines(&hyps, &refs)?;
    Ok((
        b.bleu,
        vec![trained.outcome.checkpoint, trained.outcome.metrics_log, hyp_path],
    ))
}

/// Trains and evaluates every cell under every seed. Failed runs are
/// recorded in their cell and the grid continues.
pub fn ablate(base: &RunConfig, plan: &AblationPlan, out: &Path) -> CliResult<AblationReport> {
    let corpus = Corpus::load(Path::new(&base.paths.corpus))?;
    if corpus.split(plan.split).is_empty() {
        return Err(CliError::usage(format!("{} split is empty", plan.split)));
    }
    let mut done: BTreeMap<String, Result<f64, String>> = BTreeMap::new();
    let mut results = Vec::new();
    let mut outputs = Vec::new();
    for cell in &plan.cells {
        let cfg = cell.configure(base)?;
        let mut res = CellResult {
            cell: cell.clone(),
            strategy: cfg.retrieval.strategy,
            hga: cfg.model.hga,
            lambda: cfg.loss.lambda,
            bleu: Vec::new(),
            errors: Vec::new(),
        };
        for &seed in &plan.seeds {
            let mut run = cfg.clone();
            run.seed = seed;
            let key = cache_key(&run);
            let r = match done.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let dir = out.join("cells").join(cell.slug()).join(format!("seed-{seed}"));
                    run.paths.out = dir.display().to_string();
                    let r = match run_cell(&run, &dir, plan.split, &corpus) {
                        Ok((b, files)) => {
                            outputs.extend(files);
                            Ok(b)
                        }
                        Err(e) => Err(e.message),
                    };
                    done.insert(key, r.clone());
                    r
                }
            };
            match r {
                Ok(b) => res.bleu.push(Some(b)),
                Err(e) => {
                    res.bleu.push(None);
                    res.errors.push(format!("seed {seed}: {e}"));
                }
            }
        }
        results.push(res);
    }
    let csv = out.join("grid.csv");
    write_atomic(&csv, to_csv(&results).as_bytes())?;
    Ok(AblationReport { results, csv, outputs })
}

pub fn to_csv(results: &[CellResult]) -> String {
    let mut s = String::from("variant,strategy,alpha,m_size,hga,lambda,bleu_mean,bleu_per_seed,failures\n");
    for r in results {
        let per: Vec<String> = r
            .bleu
            .iter()
            .map(|b| b.map_or("nan".into(), |x| format!("{x:.4}")))
            .collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.cell.variant,
            r.strategy,
            r.cell.alpha,
            r.cell.m_size,
            serde_json::to_value(r.hga).unwrap().as_str().unwrap(),
            r.lambda,
            r.mean().map_or("nan".into(), |x| format!("{x:.4}")),
            per.join(";"),
            r.errors.len()
        );
    }
    s
}
