use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context as _};
use serde::Deserialize;

use kubench::catalog::{Catalog, KuId};
use kubench::detector::{Detector, DetectorConfig, KuVector, VectorRecord};
use kubench::evaluator::{compare, evaluate, heatmap_data, EvalConfig, PassAtKTable};
use kubench::gateway::{Gateway, GatewayMode, HttpTransport};
use kubench::ingestion::{load_benchmark, scan_project, BenchmarkSet, ScanOptions, TaskRecord, DEFAULT_MAX_CHARS};
use kubench::metrics::{
    coverage, gini, js_distance, lorenz, real_world_reference, relative_improvement, CoverageDistribution,
    ReferenceMode,
};
use kubench::report::{
    comparison_rows, coverage_csv, heatmap_csv, jsd_csv, lorenz_csv, pass_at_k_comparison_table, pass_at_k_csv,
    stat_table, AugmentArtifact, Consolidated, CoverageArtifact, DatasetCoverage, EvaluationArtifact, GapArtifact,
    StatRow, SynthesisArtifact,
};
use kubench::sandbox::{Executor, ProcessSandbox, RecordedVerdicts, RecordingExecutor};
use kubench::stats::{cliffs_delta, rank_sum_test, signed_rank_test};
use kubench::synthesizer::{gap_report, AttemptOutcome, ContextFile, SynthesisConfig, Synthesizer};

use crate::args::*;
use crate::run::{usage, CliError, CliResult, Run};

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    let mut run = Run::new(cli.command.name(), &g.out_dir);
    let mut label: Option<String> = None;
    let result = match &cli.command {
        Command::Detect(a) => cmd_detect(&mut run, g, a, &mut label),
        Command::Coverage(a) => cmd_coverage(&mut run, g, a),
        Command::Lorenz(a) => cmd_lorenz(&mut run, g, a),
        Command::GapReport(a) => cmd_gap_report(&mut run, g, a),
        Command::Synthesize(a) => cmd_synthesize(&mut run, g, a),
        Command::Augment(a) => cmd_augment(&mut run, g, a, &mut label),
        Command::Evaluate(a) => cmd_evaluate(&mut run, g, a, &mut label),
        Command::Compare(a) => cmd_compare(&mut run, g, a),
        Command::Report(a) => cmd_report(&mut run, g, a),
    };
    let manifest = g.manifest.clone().unwrap_or_else(|| {
        let stem = match &label {
            Some(l) => format!("manifest-{}-{}.json", cli.command.name(), file_safe(l)),
            None => format!("manifest-{}.json", cli.command.name()),
        };
        g.out_dir.join(stem)
    });
    let config = serde_json::to_value(cli).unwrap_or(serde_json::Value::Null);
    let error = match &result {
        Ok(()) => None,
        Err(CliError::Usage(m)) => Some(m.clone()),
        Err(CliError::Domain(e)) => Some(format!("{e:#}")),
    };
    match run.finish(&manifest, g.seed, &config, error) {
        Ok(()) => result,
        Err(e) if result.is_ok() => Err(e.into()),
        Err(e) => {
            eprintln!("warning: manifest not written: {e:#}");
            result
        }
    }
}

/// Replaces characters that are awkward in file names.
pub fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '+') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn load_catalog(run: &mut Run, g: &GlobalArgs) -> anyhow::Result<Catalog> {
    if let Some(p) = &g.catalog {
        run.input(p)?;
    }
    Ok(Catalog::load(g.catalog.as_deref())?)
}

fn build_gateway(run: &mut Run, g: &GlobalArgs) -> anyhow::Result<Gateway> {
    let mode: GatewayMode = g.gateway.into();
    let mut gateway = if mode == GatewayMode::Replay {
        run.input_dir(&g.fixtures)?;
        Gateway::replay(&g.fixtures)
    } else {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| anyhow!("{API_KEY_ENV} must hold the provider API key for gateway mode `{mode:?}`"))?;
        let transport = HttpTransport::new(&g.provider_url, key, Duration::from_secs(g.request_timeout_secs))?;
        if mode == GatewayMode::ReplayOrRecord {
            run.input_dir(&g.fixtures)?;
        }
        Gateway::record(&g.fixtures, Arc::new(transport)).with_mode(mode)
    };
    if let Some(limit) = g.max_live_calls {
        gateway = gateway.with_max_live_calls(limit);
    }
    Ok(gateway)
}

enum Exec {
    Recorded(RecordedVerdicts),
    Process(ProcessSandbox),
    Recording(RecordingExecutor<ProcessSandbox>, PathBuf),
}

impl Exec {
    fn as_dyn(&self) -> &dyn Executor {
        match self {
            Exec::Recorded(r) => r,
            Exec::Process(p) => p,
            Exec::Recording(r, _) => r,
        }
    }

    /// Adds this run's verdicts to the recording file, if recording.
    fn finish(self, run: &mut Run) -> anyhow::Result<()> {
        if let Exec::Recording(rec, path) = self {
            let mut all = if path.exists() {
                RecordedVerdicts::load(&path)?
            } else {
                RecordedVerdicts::new()
            };
            all.extend(rec.recorded());
            run.write(&path, &all.to_json())?;
        }
        Ok(())
    }
}

fn build_executor(run: &mut Run, g: &GlobalArgs) -> anyhow::Result<Exec> {
    if let Some(path) = &g.verdicts {
        run.input(path)?;
        return Ok(Exec::Recorded(RecordedVerdicts::load(path)?));
    }
    let sandbox = match &g.harness {
        Some(h) => {
            run.input(h)?;
            ProcessSandbox::new(&g.python, h)?
        }
        None => ProcessSandbox::with_embedded_harness(&g.python)?,
    };
    Ok(match &g.record_verdicts {
        Some(path) => Exec::Recording(RecordingExecutor::new(sandbox), path.clone()),
        None => Exec::Process(sandbox),
    })
}

fn load_bench(run: &mut Run, input: &BenchmarkInput) -> CliResult<BenchmarkSet> {
    let Some(path) = &input.benchmark else {
        return usage("--benchmark is required");
    };
    let format = match input.format {
        Some(f) => f,
        None if path.extension().is_some_and(|e| e == "json") => FormatArg::NativeJson,
        None => return usage("--format is required for JSONL benchmarks (humaneval-jsonl or mbpp-jsonl)"),
    };
    run.input(path)?;
    let mut bench = load_benchmark(path, format.into())?;
    if let Some(name) = &input.name {
        bench.name = name.clone();
    }
    Ok(bench)
}

fn read_vectors(run: &mut Run, path: &Path) -> anyhow::Result<Vec<VectorRecord>> {
    let records: Vec<VectorRecord> = run.read_jsonl(path)?;
    if records.is_empty() {
        bail!("{} holds no vectors", path.display());
    }
    Ok(records)
}

fn read_coverage(run: &mut Run, path: Option<&PathBuf>, flag: &str) -> CliResult<CoverageArtifact> {
    let Some(path) = path else {
        return usage(format!("{flag} is required (run `kubench coverage` first)"));
    };
    Ok(run.read_json(path)?)
}

fn reference_of(art: &CoverageArtifact) -> anyhow::Result<&CoverageDistribution> {
    art.reference.as_ref().ok_or_else(|| {
        anyhow!("the coverage artifact has no reference distribution; rerun `kubench coverage` with --corpus")
    })
}

fn parse_ku(catalog: &Catalog, raw: &str) -> CliResult<KuId> {
    let id = match raw.parse::<KuId>() {
        Ok(id) => id,
        Err(_) => match catalog.find(raw) {
            Some(unit) => unit.id,
            None => return usage(format!("unknown KU `{raw}`")),
        },
    };
    if catalog.ku_index(&id).is_err() {
        return usage(format!("KU {id} is not in the catalog"));
    }
    Ok(id)
}

fn cmd_detect(run: &mut Run, g: &GlobalArgs, a: &DetectArgs, label: &mut Option<String>) -> CliResult<()> {
    let catalog = load_catalog(run, g)?;
    let mut items: Vec<(String, String)> = Vec::new();
    let mut origins: Vec<(Option<kubench::ingestion::SourceFileRecord>, Option<TaskRecord>)> = Vec::new();
    let name = if let Some(root) = &a.project {
        let Some(category) = a.category else {
            return usage("--category is required with --project");
        };
        let name = a.input.name.clone().unwrap_or_else(|| {
            root.canonicalize()
                .ok()
                .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "project".into())
        });
        let options = ScanOptions {
            exclude_globs: a.exclude.clone(),
            max_chars: a.max_chars.unwrap_or(DEFAULT_MAX_CHARS),
        };
        run.input_dir(root)?;
        for file in scan_project(root, &name, category.into(), &options)? {
            items.push((file.artifact_id(), file.content.clone()));
            origins.push((Some(file), None));
        }
        name
    } else if a.input.benchmark.is_some() {
        let bench = load_bench(run, &a.input)?;
        for task in &bench.tasks {
            items.push((task.task_id.clone(), task.runnable_solution()));
            origins.push((None, Some(task.clone())));
        }
        bench.name
    } else {
        return usage("give either --benchmark or --project");
    };
    *label = Some(name.clone());
    if items.is_empty() {
        return Err(anyhow!("nothing to detect in `{name}`").into());
    }
    let gateway = build_gateway(run, g)?;
    let detector = Detector::new(
        &gateway,
        &catalog,
        DetectorConfig {
            model: a.model.clone(),
            batch_size: a.batch_size,
            ..DetectorConfig::default()
        },
    );
    let results = detector.detect_batch(&items);
    let mut records = Vec::new();
    let mut failed = 0;
    for (((id, _), (source, task)), result) in items.iter().zip(origins).zip(results) {
        match result {
            Ok(d) => {
                for w in &d.warnings {
                    log::warn!("{id}: {w}");
                }
                records.push(VectorRecord {
                    vector: d.vector,
                    source,
                    task,
                });
            }
            Err(e) => {
                failed += 1;
                log::warn!("{id}: skipped, detection failed: {e}");
            }
        }
    }
    if records.is_empty() {
        return Err(anyhow!("detection failed for all {} artifacts of `{name}`", items.len()).into());
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| run.out_path(&format!("vectors-{}.jsonl", file_safe(&name))));
    run.write_jsonl(&out, &records)?;
    println!(
        "{name}: {} of {} artifacts detected ({failed} skipped) -> {}",
        records.len(),
        items.len(),
        out.display()
    );
    Ok(())
}

fn dataset_spec(raw: &str) -> (String, PathBuf) {
    if let Some((label, path)) = raw.split_once('=') {
        if !label.is_empty() && !path.is_empty() {
            return (label.to_string(), PathBuf::from(path));
        }
    }
    let path = PathBuf::from(raw);
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let label = stem.strip_prefix("vectors-").unwrap_or(&stem).to_string();
    (label, path)
}

fn cmd_coverage(run: &mut Run, g: &GlobalArgs, a: &CoverageArgs) -> CliResult<()> {
    if a.dataset.is_empty() && a.corpus.is_empty() {
        return usage("give at least one --dataset or --corpus file");
    }
    let catalog = load_catalog(run, g)?;
    let mut datasets = Vec::new();
    for raw in &a.dataset {
        let (label, path) = dataset_spec(raw);
        let vectors: Vec<KuVector> = read_vectors(run, &path)?.into_iter().map(|r| r.vector).collect();
        let distribution = coverage(&vectors, &label)?;
        let total_instances = vectors.iter().map(KuVector::total).sum();
        datasets.push(DatasetCoverage {
            gini: Some(gini(&distribution.proportions)?),
            distribution,
            n_artifacts: vectors.len(),
            total_instances,
            jsd_to_reference: None,
        });
    }

    let mut by_project: BTreeMap<String, (kubench::ingestion::ProjectCategory, Vec<KuVector>)> = BTreeMap::new();
    for path in &a.corpus {
        for record in read_vectors(run, path)? {
            let source = record.source.as_ref().ok_or_else(|| {
                anyhow!(
                    "{}: `{}` has no source file record",
                    path.display(),
                    record.vector.artifact_id
                )
            })?;
            by_project
                .entry(source.project.clone())
                .or_insert_with(|| (source.category, Vec::new()))
                .1
                .push(record.vector);
        }
    }
    let mut per_project: Vec<(kubench::ingestion::ProjectCategory, CoverageDistribution)> = Vec::new();
    for (project, (category, vectors)) in &by_project {
        match coverage(vectors, project) {
            Ok(d) => per_project.push((*category, d)),
            Err(e) => log::warn!("project `{project}` left out of the reference: {e}"),
        }
    }
    let mode: ReferenceMode = a.reference.into();
    let reference = if by_project.is_empty() {
        None
    } else {
        Some(match mode {
            ReferenceMode::Median => {
                let dists: Vec<CoverageDistribution> = per_project.iter().map(|(_, d)| d.clone()).collect();
                real_world_reference(&dists, &a.reference_label)?
            }
            ReferenceMode::Pooled => {
                let all: Vec<KuVector> = by_project.values().flat_map(|(_, v)| v.iter().cloned()).collect();
                coverage(&all, &a.reference_label)?
            }
        })
    };
    if let Some(r) = &reference {
        for d in &mut datasets {
            d.jsd_to_reference = Some(js_distance(&d.distribution, r)?);
        }
    }

    let mut stat_rows = Vec::new();
    use kubench::ingestion::ProjectCategory::{Organizational, Utility};
    let org: Vec<&CoverageDistribution> = per_project
        .iter()
        .filter(|(c, _)| *c == Organizational)
        .map(|(_, d)| d)
        .collect();
    let util: Vec<&CoverageDistribution> = per_project
        .iter()
        .filter(|(c, _)| *c == Utility)
        .map(|(_, d)| d)
        .collect();
    if !org.is_empty() && !util.is_empty() {
        for (i, unit) in catalog.units().iter().enumerate() {
            let x: Vec<f64> = org.iter().map(|d| d.proportions[i]).collect();
            let y: Vec<f64> = util.iter().map(|d| d.proportions[i]).collect();
            let test = rank_sum_test(&x, &y, a.alpha, catalog.len())?;
            let effect = cliffs_delta(&x, &y)?;
            stat_rows.push(StatRow::new(
                format!("{} {}: organizational vs utility", unit.id, unit.name),
                &test,
                Some(&effect),
            ));
        }
    } else if !by_project.is_empty() {
        log::warn!("project-category tests skipped: both organizational and utility projects are needed");
    }

    let artifact = CoverageArtifact {
        datasets,
        reference,
        reference_mode: mode,
        stat_rows,
    };
    let mut cols: Vec<&CoverageDistribution> = artifact.datasets.iter().map(|d| &d.distribution).collect();
    if let Some(r) = &artifact.reference {
        cols.push(r);
    }
    run.write_json(&run.out_path("coverage.json"), &artifact)?;
    run.write(&run.out_path("coverage.csv"), &coverage_csv(&catalog, &cols))?;
    if let Some(r) = &artifact.reference {
        let rows: Vec<(String, String, f64)> = artifact
            .datasets
            .iter()
            .filter_map(|d| {
                d.jsd_to_reference
                    .map(|j| (d.distribution.dataset_label.clone(), r.dataset_label.clone(), j))
            })
            .collect();
        run.write(&run.out_path("jsd.csv"), &jsd_csv(&rows))?;
    }
    let text = Consolidated {
        coverage: Some(artifact.clone()),
        ..Default::default()
    };
    let rendered = section_text(&text, &catalog, "Coverage");
    run.write(&run.out_path("coverage.txt"), &rendered)?;
    print!("{rendered}");
    Ok(())
}

/// One rendered section (plus stat rows) from a consolidated report.
fn section_text(report: &Consolidated, catalog: &Catalog, title: &str) -> String {
    let full = report.render_text(catalog);
    let start = full.find(&format!("## {title}\n")).unwrap_or(0);
    let body = &full[start..];
    let end = body[3..].find("\n## ").map_or(body.len(), |i| i + 3);
    let mut out = body[..end].trim_end().to_string();
    out.push('\n');
    let rows = report.stat_rows();
    if !rows.is_empty() {
        out.push_str("\n## Statistical tests\n\n");
        out.push_str(&stat_table(&rows));
    }
    out
}

fn cmd_lorenz(run: &mut Run, g: &GlobalArgs, a: &LorenzArgs) -> CliResult<()> {
    let art = read_coverage(run, a.coverage.as_ref(), "--coverage")?;
    load_catalog(run, g)?;
    let mut curves = Vec::new();
    for d in art
        .datasets
        .iter()
        .map(|d| &d.distribution)
        .chain(art.reference.as_ref())
    {
        curves.push((d.dataset_label.clone(), lorenz(&d.proportions)?));
    }
    run.write(&run.out_path("lorenz.csv"), &lorenz_csv(&curves))?;
    for (label, c) in &curves {
        println!("{label}: Gini {:.3}", c.gini);
    }
    Ok(())
}

fn cmd_gap_report(run: &mut Run, g: &GlobalArgs, a: &GapReportArgs) -> CliResult<()> {
    let catalog = load_catalog(run, g)?;
    let art = read_coverage(run, a.coverage.as_ref(), "--coverage")?;
    let reference = reference_of(&art)?;
    if art.datasets.is_empty() {
        return Err(anyhow!("the coverage artifact has no benchmark datasets").into());
    }
    let benchmarks: Vec<CoverageDistribution> = art.datasets.iter().map(|d| d.distribution.clone()).collect();
    let (targets, entries) = gap_report(&catalog, &benchmarks, reference)?;
    let mut stat_rows = Vec::new();
    for b in &benchmarks {
        let test = signed_rank_test(&b.proportions, &reference.proportions, a.alpha, benchmarks.len())?;
        stat_rows.push(StatRow::new(
            format!("{} vs {}", b.dataset_label, reference.dataset_label),
            &test,
            None,
        ));
    }
    let target_names = targets
        .iter()
        .map(|id| catalog.get(id).map(|u| u.name.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let artifact = GapArtifact {
        targets,
        target_names,
        entries,
        stat_rows,
    };
    run.write_json(&run.out_path("gaps.json"), &artifact)?;
    let report = Consolidated {
        gaps: Some(artifact),
        ..Default::default()
    };
    let text = section_text(&report, &catalog, "Gaps");
    run.write(&run.out_path("gaps.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Deserialize)]
struct LooseTaskSet {
    name: String,
    tasks: Vec<TaskRecord>,
}

fn cmd_synthesize(run: &mut Run, g: &GlobalArgs, a: &SynthesizeArgs) -> CliResult<()> {
    let catalog = load_catalog(run, g)?;
    let bench = load_bench(run, &a.input)?;
    let Some(vec_path) = &a.benchmark_vectors else {
        return usage("--benchmark-vectors is required (run `kubench detect --benchmark` first)");
    };
    if a.corpus.is_empty() {
        return usage("at least one --corpus file is required (run `kubench detect --project` first)");
    }
    let bench_vectors: Vec<KuVector> = read_vectors(run, vec_path)?.into_iter().map(|r| r.vector).collect();
    if bench_vectors.len() != bench.len() {
        log::warn!(
            "{} vectors for {} benchmark tasks; coverage uses the vectors as given",
            bench_vectors.len(),
            bench.len()
        );
    }
    let mut corpus = Vec::new();
    for path in &a.corpus {
        for r in read_vectors(run, path)? {
            match r.source {
                Some(record) => corpus.push(ContextFile {
                    record,
                    vector: r.vector,
                }),
                None => log::warn!(
                    "{}: `{}` has no source; not usable as context",
                    path.display(),
                    r.vector.artifact_id
                ),
            }
        }
    }
    let cov = read_coverage(run, a.coverage.as_ref(), "--coverage")?;
    let reference = reference_of(&cov)?.clone();
    let targets: Vec<KuId> = if !a.ku.is_empty() {
        a.ku.iter().map(|k| parse_ku(&catalog, k)).collect::<CliResult<_>>()?
    } else if let Some(p) = &a.gaps {
        let gaps: GapArtifact = run.read_json(p)?;
        gaps.targets
    } else {
        return usage("give target KUs with --ku or a --gaps artifact");
    };
    if targets.is_empty() {
        println!("no target KUs; nothing to synthesize");
    }
    let config = SynthesisConfig {
        target_kus: targets.clone(),
        batch_n: a.quota,
        max_retries_per_context: a.max_retries,
        min_ku_instances: a.min_instances,
        generation_temperature: a.temperature,
        convergence: a.convergence.into(),
        jsd_epsilon: a.jsd_epsilon,
        alpha: a.alpha,
        max_iterations: a.max_iterations,
        generator_model: a.generator_model.clone(),
        judge_model: a.judge_model.clone(),
        context_budget: a.context_budget,
        timeout_secs: a.timeout_secs,
        ..SynthesisConfig::default()
    };
    if let Err(e) = config.validate() {
        return usage(e.to_string());
    }
    let gateway = build_gateway(run, g)?;
    let exec = build_executor(run, g)?;
    let detector_config = DetectorConfig {
        model: a.detector_model.clone(),
        ..DetectorConfig::default()
    };
    let (new_tasks, new_vectors, attempts, artifact) = if targets.is_empty() {
        (
            Vec::new(),
            Vec::new(),
            Vec::new(),
            SynthesisArtifact {
                target_kus: Vec::new(),
                iterations: Vec::new(),
                converged: false,
                fired: None,
                n_new_tasks: 0,
                attempts: 0,
                accepted: 0,
                shortfall: BTreeMap::new(),
                no_context: Vec::new(),
                near_duplicates: 0,
            },
        )
    } else {
        let synth = Synthesizer::new(&catalog, &gateway, &gateway, exec.as_dyn(), detector_config, config);
        let merged_label = format!("{}+{}", bench.name, a.set_name);
        let out = synth.run_convergence_loop(&bench, &bench_vectors, &corpus, &reference, &merged_label)?;
        let artifact = SynthesisArtifact {
            target_kus: targets,
            iterations: out.iterations.clone(),
            converged: out.converged,
            fired: out.fired,
            n_new_tasks: out.new_tasks.len(),
            attempts: out.attempts.len(),
            accepted: out
                .attempts
                .iter()
                .filter(|x| x.outcome == AttemptOutcome::Accepted)
                .count(),
            shortfall: out.shortfall.clone(),
            no_context: out.no_context.clone(),
            near_duplicates: out.attempts.iter().filter(|x| x.near_duplicate_of.is_some()).count(),
        };
        (out.new_tasks, out.new_vectors, out.attempts, artifact)
    };
    exec.finish(run)?;
    let set = serde_json::json!({ "name": a.set_name, "tasks": new_tasks });
    let name = file_safe(&a.set_name);
    run.write_json(&run.out_path(&format!("{name}.json")), &set)?;
    let records: Vec<VectorRecord> = new_vectors
        .into_iter()
        .zip(&new_tasks)
        .map(|(vector, task)| VectorRecord {
            vector,
            source: None,
            task: Some(task.clone()),
        })
        .collect();
    run.write_jsonl(&run.out_path(&format!("vectors-{name}.jsonl")), &records)?;
    run.write_jsonl(&run.out_path("synthesis-attempts.jsonl"), &attempts)?;
    run.write_json(&run.out_path("synthesis.json"), &artifact)?;
    let report = Consolidated {
        synthesis: Some(artifact),
        ..Default::default()
    };
    print!("{}", section_text(&report, &catalog, "Synthesis"));
    Ok(())
}

fn cmd_augment(run: &mut Run, g: &GlobalArgs, a: &AugmentArgs, label: &mut Option<String>) -> CliResult<()> {
    load_catalog(run, g)?;
    let bench = load_bench(run, &a.input)?;
    let Some(tasks_path) = &a.tasks else {
        return usage("--tasks is required (run `kubench synthesize` first)");
    };
    let extra: LooseTaskSet = run.read_json(tasks_path)?;
    let name = a
        .augmented_name
        .clone()
        .unwrap_or_else(|| format!("Augmented-{}", bench.name));
    *label = Some(name.clone());
    let merged = bench.augment(&name, &extra.tasks)?;
    let stem = file_safe(&name);
    run.write(&run.out_path(&format!("{stem}.json")), &merged.to_json())?;

    let mut artifact = AugmentArtifact {
        original: bench.name.clone(),
        augmented: name.clone(),
        n_original: bench.len(),
        n_added: extra.tasks.len(),
        n_total: merged.len(),
        jsd_before: None,
        jsd_after: None,
        delta_rel_pct: None,
    };
    match (&a.benchmark_vectors, &a.task_vectors, &a.coverage) {
        (Some(bv), Some(tv), Some(_)) => {
            let cov = read_coverage(run, a.coverage.as_ref(), "--coverage")?;
            let reference = reference_of(&cov)?;
            let base = read_vectors(run, bv)?;
            let added: Vec<VectorRecord> = run.read_jsonl(tv)?;
            let base_vectors: Vec<KuVector> = base.iter().map(|r| r.vector.clone()).collect();
            let all: Vec<VectorRecord> = base.into_iter().chain(added).collect();
            let all_vectors: Vec<KuVector> = all.iter().map(|r| r.vector.clone()).collect();
            let before = js_distance(&coverage(&base_vectors, &bench.name)?, reference)?;
            let after = js_distance(&coverage(&all_vectors, &name)?, reference)?;
            artifact.jsd_before = Some(before);
            artifact.jsd_after = Some(after);
            artifact.delta_rel_pct = relative_improvement(before, after).ok().map(|f| f * 100.0);
            run.write_jsonl(&run.out_path(&format!("vectors-{stem}.jsonl")), &all)?;
        }
        (None, None, _) => {}
        _ => return usage("distances need --benchmark-vectors, --task-vectors and --coverage together"),
    }
    run.write_json(&run.out_path(&format!("augment-{stem}.json")), &artifact)?;
    print!(
        "{} ({}) + {} ({}) -> {} ({} tasks)",
        bench.name, artifact.n_original, extra.name, artifact.n_added, name, artifact.n_total
    );
    match (artifact.jsd_before, artifact.jsd_after, artifact.delta_rel_pct) {
        (Some(b), Some(af), Some(d)) => println!("; JSD {b:.3} -> {af:.3} (improvement {d:.1}%)"),
        _ => println!(),
    }
    Ok(())
}

fn cmd_evaluate(run: &mut Run, g: &GlobalArgs, a: &EvaluateArgs, label: &mut Option<String>) -> CliResult<()> {
    if a.model.is_empty() {
        return usage("at least one --model is required");
    }
    if a.k.is_empty() || a.k.contains(&0) {
        return usage("--k values must be positive");
    }
    if a.heatmap_k == 0 || a.heatmap_k > a.n {
        return usage(format!("--heatmap-k must be between 1 and --n ({})", a.n));
    }
    let catalog = load_catalog(run, g)?;
    let bench = load_bench(run, &a.input)?;
    *label = Some(bench.name.clone());
    let cfg = EvalConfig {
        n_samples: a.n,
        ks: a.k.clone(),
        temperature: a.temperature,
        batch_size: a.batch_size,
        parallelism: a.parallelism,
        timeout: Duration::from_secs_f64(a.timeout_secs),
        per_ku_mode: a.per_ku.into(),
    };
    let mut dominant = HashMap::new();
    if a.per_ku == PerKuArg::Dominant {
        let Some(p) = &a.vectors else {
            return usage("--per-ku dominant needs --vectors");
        };
        for r in read_vectors(run, p)? {
            if let Some(idx) = r.vector.dominant() {
                dominant.insert(
                    r.vector.artifact_id.clone(),
                    *catalog.id_at(idx).expect("index in catalog"),
                );
            }
        }
    }
    let gateway = build_gateway(run, g)?;
    let exec = build_executor(run, g)?;
    let mut tables: Vec<PassAtKTable> = Vec::new();
    let mut cells = Vec::new();
    let ds = file_safe(&bench.name);
    for model in &a.model {
        let ev = match evaluate(&gateway, exec.as_dyn(), model, &bench, &cfg, &dominant) {
            Ok(ev) => ev,
            Err(e) => {
                exec.finish(run)?;
                return Err(e.into());
            }
        };
        let heatmap = heatmap_data(&ev.outcomes, &catalog, a.heatmap_k)?;
        let m = file_safe(model);
        run.write_jsonl(&run.out_path(&format!("outcomes-{ds}--{m}.jsonl")), &ev.outcomes)?;
        let artifact = EvaluationArtifact {
            table: ev.table.clone(),
            heatmap: heatmap.clone(),
            heatmap_k: a.heatmap_k,
        };
        run.write_json(&run.out_path(&format!("eval-{ds}--{m}.json")), &artifact)?;
        tables.push(ev.table);
        cells.extend(heatmap);
    }
    exec.finish(run)?;
    let refs: Vec<&PassAtKTable> = tables.iter().collect();
    run.write(&run.out_path(&format!("pass_at_k-{ds}.csv")), &pass_at_k_csv(&refs))?;
    if cells.iter().any(|c| c.value.is_some()) {
        run.write(
            &run.out_path(&format!("heatmap-{ds}.csv")),
            &heatmap_csv(&catalog, &cells, a.heatmap_k),
        )?;
    }
    let report = Consolidated {
        evaluations: tables
            .into_iter()
            .map(|table| EvaluationArtifact {
                table,
                heatmap: Vec::new(),
                heatmap_k: a.heatmap_k,
            })
            .collect(),
        ..Default::default()
    };
    print!("{}", section_text(&report, &catalog, "Evaluation"));
    Ok(())
}

fn read_tables(run: &mut Run, paths: &[PathBuf], flag: &str) -> CliResult<Vec<PassAtKTable>> {
    if paths.is_empty() {
        return usage(format!("at least one {flag} evaluation artifact is required"));
    }
    let mut out = Vec::new();
    for p in paths {
        let art: EvaluationArtifact = run.read_json(p)?;
        out.push(art.table);
    }
    Ok(out)
}

fn cmd_compare(run: &mut Run, g: &GlobalArgs, a: &CompareArgs) -> CliResult<()> {
    load_catalog(run, g)?;
    if a.n_comparisons == 0 {
        return usage("--n-comparisons must be at least 1");
    }
    let original = read_tables(run, &a.original, "--original")?;
    let augmented = read_tables(run, &a.augmented, "--augmented")?;
    let report = compare(&original, &augmented, a.alpha, a.n_comparisons)?;
    run.write_json(&run.out_path("comparison.json"), &report)?;
    let mut text = format!("{} vs {}\n\n", report.original_label, report.augmented_label);
    text.push_str(&pass_at_k_comparison_table(&report));
    text.push('\n');
    text.push_str(&stat_table(&comparison_rows(&report)));
    run.write(&run.out_path("comparison.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn sorted_matches(dir: &Path, prefix: &str, suffix: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(prefix) && n.ends_with(suffix))
        })
        .collect();
    found.sort();
    Ok(found)
}

fn cmd_report(run: &mut Run, g: &GlobalArgs, a: &ReportArgs) -> CliResult<()> {
    let catalog = load_catalog(run, g)?;
    let dir = a.inputs.clone().unwrap_or_else(|| g.out_dir.clone());
    if !dir.is_dir() {
        return Err(anyhow!(
            "input directory {} does not exist; run `kubench coverage` first",
            dir.display()
        )
        .into());
    }
    let mut report = Consolidated::default();
    let single = |run: &mut Run, name: &str| -> anyhow::Result<Option<PathBuf>> {
        let _ = run;
        let p = dir.join(name);
        Ok(p.is_file().then_some(p))
    };
    if let Some(p) = single(run, "coverage.json")? {
        report.coverage = Some(run.read_json(&p)?);
    }
    if let Some(p) = single(run, "gaps.json")? {
        report.gaps = Some(run.read_json(&p)?);
    }
    if let Some(p) = single(run, "synthesis.json")? {
        report.synthesis = Some(run.read_json(&p)?);
    }
    for p in sorted_matches(&dir, "augment-", ".json")? {
        report.augment.push(run.read_json(&p)?);
    }
    for p in sorted_matches(&dir, "eval-", ".json")? {
        report.evaluations.push(run.read_json(&p)?);
    }
    if let Some(p) = single(run, "comparison.json")? {
        report.comparison = Some(run.read_json(&p)?);
    }
    if report.is_empty() {
        let steps: Vec<&str> = kubench::report::SECTIONS.iter().map(|(_, c)| *c).collect();
        return Err(anyhow!(
            "no artifacts found in {}; run one of: {}",
            dir.display(),
            steps.join(", ")
        )
        .into());
    }
    for p in sorted_matches(&dir, "", ".csv")? {
        if let Some(n) = p.file_name().and_then(|n| n.to_str()) {
            report.csv_files.push(n.to_string());
        }
    }
    let text = report.render_text(&catalog);
    run.write(&run.out_path("report.json"), &report.to_json())?;
    run.write(&run.out_path("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
