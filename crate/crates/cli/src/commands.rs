use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use moscode::assign::{train_hybrid_lightrnn, HybridConfig, Solver, DEFAULT_EXACT_CAP};
use moscode::bench::{compare_coded_vs_flat, run_bench, BenchResult, BenchSpec};
use moscode::bpe::{self, encoded_length, MergeList};
use moscode::codelm::TrainConfig;
use moscode::codetable::{CodeId, CodeTable, TableFile};
use moscode::corpus::{build_vocab, read_corpus, tokenize};
use moscode::mos::{bottleneck_report, BottleneckConfig};
use moscode::Parallelism;

use crate::config::{BenchOpts, BpeOpts, RankOpts, TableOpts};

const DEFAULT_DICT_SIZE: usize = 32_000;
const DEFAULT_ROUNDS: usize = 3;
const DEFAULT_D_EMB: usize = 16;
const DEFAULT_D_HID: usize = 32;
/// Printed for the OOV word, which has no surface form.
const UNK: &str = "<unk>";

#[derive(Args, Debug)]
pub struct StreamArgs {
    /// Merge file (`#bpe-v1`) or table file (`#hlr-v1`).
    #[arg(long)]
    coder: PathBuf,
    /// Defaults to stdin.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Defaults to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn source(path: Option<&Path>) -> Result<Box<dyn BufRead>> {
    Ok(match path {
        Some(p) => Box::new(BufReader::new(
            File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        None => Box::new(io::stdin().lock()),
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

/// Reads the corpus, keeping blank lines out of training data.
fn load_corpus(path: &Path, max_vocab: Option<usize>) -> Result<(moscode::corpus::Vocabulary, Vec<Vec<usize>>)> {
    let corpus = read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let vocab = build_vocab(&corpus, max_vocab.unwrap_or(usize::MAX))
        .with_context(|| format!("building vocabulary from {}", path.display()))?;
    let ids = vocab
        .encode_corpus(&corpus)
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    Ok((vocab, ids))
}

pub fn train_bpe(input: &Path, output: &Path, opts: BpeOpts) -> Result<()> {
    let corpus = read_corpus(input).with_context(|| format!("reading corpus {}", input.display()))?;
    let vocab = build_vocab(&corpus, opts.max_vocab.unwrap_or(usize::MAX))?;
    let target = opts.merges.unwrap_or(DEFAULT_DICT_SIZE);
    let merges = bpe::train_bpe(&vocab, target)?;
    let mut out = create(output)?;
    merges
        .write(&mut out)
        .and_then(|_| out.flush())
        .with_context(|| format!("writing {}", output.display()))?;

    // Unmerged, every character is one code.
    let chars: u64 = vocab
        .entries()
        .iter()
        .map(|(w, c)| w.as_str().chars().count() as u64 * c)
        .sum();
    let coded = encoded_length(&vocab, &merges);
    println!("dictionary_size\t{}", merges.dictionary_size());
    println!("merges\t{}", merges.rules().len());
    let ratio = if coded == 0 { 1.0 } else { chars as f64 / coded as f64 };
    println!("compression_ratio\t{ratio:.4}");
    if merges.dictionary_size() < target {
        println!(
            "early_stop\tno pair occurs twice; dictionary {} is below the target {target}",
            merges.dictionary_size()
        );
    }
    Ok(())
}

/// Fills missing table dimensions with the smallest that fit `n_dense` cells.
fn table_shape(n_dense: usize, rows: Option<usize>, cols: Option<usize>) -> (usize, usize) {
    let fit = |other: usize| n_dense.div_ceil(other.max(1)).max(1);
    match (rows, cols) {
        (Some(r), Some(c)) => (r, c),
        (Some(r), None) => (r, fit(r)),
        (None, Some(c)) => (fit(c), c),
        (None, None) => {
            let mut s = 1;
            while s * s < n_dense {
                s += 1;
            }
            (s, s)
        }
    }
}

pub fn learn_table(
    input: &Path,
    output: &Path,
    trace_path: &Path,
    lm_output: Option<&Path>,
    opts: TableOpts,
) -> Result<()> {
    let (vocab, corpus) = load_corpus(input, opts.max_vocab)?;
    let k_freq = opts.k_freq.unwrap_or(0);
    // Dense words plus the OOV word.
    let n_dense = (vocab.len() + 1).saturating_sub(k_freq);
    let (d1, d2) = table_shape(n_dense, opts.rows, opts.cols);
    let seed = opts.seed.unwrap_or(0);
    let defaults = TrainConfig::default();
    let cfg = HybridConfig {
        k_freq,
        d1,
        d2,
        d_emb: opts.d_emb.unwrap_or(DEFAULT_D_EMB),
        d_hid: opts.d_hid.unwrap_or(DEFAULT_D_HID),
        train: TrainConfig {
            learning_rate: opts.lr.unwrap_or(defaults.learning_rate),
            epochs: opts.epochs.unwrap_or(defaults.epochs),
            batch_size: opts.batch_size.unwrap_or(defaults.batch_size),
            clip_norm: opts.clip_norm.unwrap_or(defaults.clip_norm),
            seed,
        },
        rounds: opts.rounds.unwrap_or(DEFAULT_ROUNDS),
        exact_cap: opts.exact_cap.unwrap_or(DEFAULT_EXACT_CAP),
        mode: Parallelism::available(),
    };
    log::info!("table {k_freq} + {d1}x{d2} for {} words", vocab.len());
    let outcome = train_hybrid_lightrnn(&corpus, vocab.len(), &cfg).context("learning the code table")?;

    let words: Vec<&str> = vocab.entries().iter().map(|(w, _)| w.as_str()).collect();
    let mut out = create(output)?;
    outcome.table.write(&words, Some(seed), &mut out)?;
    out.flush().with_context(|| format!("writing {}", output.display()))?;

    let mut trace = create(trace_path)?;
    let write_trace = |trace: &mut BufWriter<File>| -> io::Result<()> {
        writeln!(trace, "#hlr-trace-v1 seed={seed}")?;
        for t in &outcome.trace {
            writeln!(trace, "{}\t{}", t.to_line(), solver_name(t.solver))?;
        }
        trace.flush()
    };
    write_trace(&mut trace).with_context(|| format!("writing {}", trace_path.display()))?;

    if let Some(path) = lm_output {
        let mut out = create(path)?;
        outcome
            .lm
            .write(Some(seed), &mut out)
            .and_then(|_| out.flush())
            .with_context(|| format!("writing {}", path.display()))?;
    }

    let codes = outcome.table.encode_corpus(&corpus)?.total_codes().max(1) as f64;
    let bits = |nats: f64| nats / (codes * std::f64::consts::LN_2);
    for t in &outcome.trace {
        println!(
            "round {}\tnll_bits_per_code {:.4} -> {:.4}\ttransport_nats {:.4} -> {:.4}\t{}",
            t.round,
            bits(t.nll_before),
            bits(t.nll_after),
            t.ot_before,
            t.ot_after,
            solver_name(t.solver)
        );
    }
    Ok(())
}

fn solver_name(s: Solver) -> &'static str {
    match s {
        Solver::Exact => "exact",
        Solver::Greedy => "greedy",
    }
}

enum Coder {
    Bpe(MergeList),
    Table(TableFile),
}

fn load_coder(path: &Path) -> Result<Coder> {
    let mut reader = open(path)?;
    let head = reader
        .fill_buf()
        .with_context(|| format!("reading {}", path.display()))?;
    let coder = if head.starts_with(b"#bpe-v1") {
        Coder::Bpe(MergeList::read(reader)?)
    } else if head.starts_with(b"#hlr-v1") {
        Coder::Table(CodeTable::read(reader)?)
    } else {
        bail!("{} is neither a merge file nor a table file", path.display());
    };
    Ok(coder)
}

/// Applies `f` to every input line, naming the line on failure.
fn map_lines(args: &StreamArgs, mut f: impl FnMut(&str) -> Result<String>) -> Result<()> {
    let input = source(args.input.as_deref())?;
    let mut out = sink(args.output.as_deref())?;
    for (i, line) in input.lines().enumerate() {
        let line = line.with_context(|| format!("line {}", i + 1))?;
        let mapped = f(&line).with_context(|| format!("line {}", i + 1))?;
        writeln!(out, "{mapped}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn encode(args: &StreamArgs) -> Result<()> {
    match load_coder(&args.coder)? {
        Coder::Bpe(m) => map_lines(args, |line| {
            let codes: Vec<String> = tokenize(line)?.iter().flat_map(|w| m.encode(w)).collect();
            Ok(codes.join(" "))
        }),
        Coder::Table(t) => {
            let index = t.word_index();
            map_lines(args, |line| {
                let ids: Vec<usize> = tokenize(line)?
                    .iter()
                    .map(|w| index.get(w.as_str()).copied().unwrap_or(t.table.unk_id()))
                    .collect();
                let codes = t.table.encode_sentence(&ids)?;
                Ok(codes.iter().map(CodeId::to_string).collect::<Vec<_>>().join(" "))
            })
        }
    }
}

pub fn decode(args: &StreamArgs) -> Result<()> {
    match load_coder(&args.coder)? {
        Coder::Bpe(m) => map_lines(args, |line| {
            let codes: Vec<&str> = line.split_whitespace().collect();
            let words = m.decode(&codes)?;
            Ok(words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(" "))
        }),
        Coder::Table(t) => map_lines(args, |line| {
            let codes = line
                .split_whitespace()
                .enumerate()
                .map(|(pos, c)| {
                    c.parse::<u32>()
                        .map(CodeId)
                        .map_err(|_| anyhow!("position {pos}: {c:?} is not a code id"))
                })
                .collect::<Result<Vec<_>>>()?;
            let ids = t.table.decode_sequence(&codes)?;
            Ok(ids.iter().map(|&id| word_name(&t, id)).collect::<Vec<_>>().join(" "))
        }),
    }
}

fn word_name(t: &TableFile, id: usize) -> &str {
    t.words.get(id).map_or(UNK, |w| w.as_str())
}

pub fn dump_table(path: &Path, output: Option<&Path>) -> Result<()> {
    let t = CodeTable::read(open(path)?).with_context(|| format!("loading {}", path.display()))?;
    let table = &t.table;
    let mut out = sink(output)?;
    writeln!(
        out,
        "#hlr-dump-v1 {} {} {} {}",
        table.k_freq(),
        table.rows(),
        table.cols(),
        table.vocab_size()
    )?;
    for w in 0..table.k_freq() {
        writeln!(out, "{}\t{}", CodeId(w as u32), word_name(&t, w))?;
    }
    // One line per row code; empty cells leave an empty field.
    for r in 0..table.rows() {
        write!(out, "{}", table.row_code(r))?;
        for c in 0..table.cols() {
            let word = table.word_at(r * table.cols() + c).map_or("", |id| word_name(&t, id));
            write!(out, "\t{word}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn rank(output: Option<&Path>, opts: RankOpts) -> Result<()> {
    let d = BottleneckConfig::default();
    let seed = opts.seed.unwrap_or(0);
    let count = opts.seeds.unwrap_or(d.seeds.len() as u64);
    let cfg = BottleneckConfig {
        n: opts.n.unwrap_or(d.n),
        v_out: opts.v_out.unwrap_or(d.v_out),
        d: opts.d.unwrap_or(d.d),
        d_context: opts.d_context.unwrap_or(d.d_context),
        truth_rank: opts.truth_rank.unwrap_or(d.truth_rank),
        mixtures: opts.mixtures.unwrap_or(d.mixtures),
        seeds: (seed..seed + count).collect(),
        iters: opts.iters.unwrap_or(d.iters),
        lr: opts.lr.unwrap_or(d.lr),
        restarts: opts.restarts.unwrap_or(d.restarts),
        rank_tol: opts.rank_tol.unwrap_or(d.rank_tol),
        mode: d.mode,
    };
    let report = bottleneck_report(&cfg)?;
    let mut out = sink(output)?;
    writeln!(
        out,
        "#rank-v1 seed={seed} seeds={count} n={} v_out={} d={} d_context={} truth_rank={} iters={} lr={} restarts={} rank_tol={}",
        cfg.n, cfg.v_out, cfg.d, cfg.d_context, cfg.truth_rank, cfg.iters, cfg.lr, cfg.restarts, cfg.rank_tol
    )?;
    writeln!(out, "#seed\tmodel\tM\td\tmean_kl\trank")?;
    // Records come in (seed, model) order.
    let per_seed = cfg.mixtures.len();
    for (i, r) in report.records.iter().enumerate() {
        writeln!(out, "{}\t{r}", cfg.seeds[i / per_seed])?;
    }
    out.flush()?;
    Ok(())
}

fn result_line(r: &BenchResult) -> String {
    format!("{r}\t{:?}", r.checksum)
}

pub fn bench(output: Option<&Path>, opts: BenchOpts) -> Result<()> {
    let d = BenchSpec::default();
    let parallel = opts.parallel.unwrap_or(false);
    let spec = BenchSpec {
        batch: opts.batch.unwrap_or(d.batch),
        d: opts.d.unwrap_or(d.d),
        sizes: opts.sizes.unwrap_or(d.sizes),
        mixtures: opts.mixtures.unwrap_or(d.mixtures),
        reps: opts.reps.unwrap_or(d.reps),
        warmup: opts.warmup.unwrap_or(d.warmup),
        seed: opts.seed.unwrap_or(d.seed),
        mode: if parallel {
            Parallelism::available()
        } else {
            Parallelism::Sequential
        },
    };
    let compare = opts
        .compare
        .as_deref()
        .map(|s| -> Result<(usize, usize)> {
            let (v, c) = s
                .split_once(':')
                .ok_or_else(|| anyhow!("--compare expects VOCAB:CODES, got {s:?}"))?;
            Ok((
                v.parse().context("--compare vocabulary size")?,
                c.parse().context("--compare code count")?,
            ))
        })
        .transpose()?;

    let mut out = sink(output)?;
    writeln!(
        out,
        "#bench-v1 seed={} batch={} d={} reps={} warmup={} parallel={parallel}",
        spec.seed, spec.batch, spec.d, spec.reps, spec.warmup
    )?;
    writeln!(out, "#config\tmedian_ms\tbytes\tspread\tchecksum")?;
    match compare {
        None => {
            for r in run_bench(&spec)? {
                writeln!(out, "{}", result_line(&r))?;
            }
        }
        Some((vocab, codes)) => {
            for &m in &spec.mixtures {
                let c = compare_coded_vs_flat(vocab, codes, m, &spec)?;
                writeln!(out, "{}", result_line(&c.flat))?;
                writeln!(out, "{}", result_line(&c.coded))?;
                writeln!(out, "{}", c.summary())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
