"""Stage orchestration over a run directory."""

from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .align_finetune import finetune, routing_steer_decode, steer_bias
from .artifacts import (
    MANIFEST_NAME,
    StageDirectory,
    atomic_write_text,
    hash_config,
    read_json,
    read_jsonl,
    sha256_file,
    write_json,
    write_jsonl,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Method, PipelineConfig, Stage, apply_overrides
from .exceptions import (
    ConfigurationError,
    EvalSetMismatchError,
    InsufficientDataError,
    MissingArtifactError,
)
from .logger import logger, timed
from .metrics_report import (
    FlopsInput,
    RunSummary,
    divergence_report,
    evaluate_side,
    flops_estimate,
    format_summary_table,
    pearson,
    relative_gain,
    selection_rate,
)
from .moe_model import MoELanguageModel, RouterBias
from .routing_analysis import (
    DivergenceProfile,
    SeqRoutingDist,
    TaskExpertMap,
    build_reference_store,
    divergence_profile,
    identify_task_experts,
    load_dists,
    save_dists,
    seq_routing_dist,
    teacher_force_trace,
)
from .synth_lang import (
    LanguageFactory,
    LanguageSpec,
    ParallelExample,
    TaxonomyLabel,
    TextSample,
    gen_corpus,
    load_languages,
    save_corpus,
    save_languages,
)
from .taxonomy import TaxonomyReport, categorize, gold_response
from .training import pretrain

BASE_RUN = "base"
# Row order of comparison tables: zero-shot, SFT, routing steering, routing-aligned
METHOD_ORDER = ["base", Method.SFT.value, "routing-steering", Method.RA_MOE.value]


def load_summary(run_dir: Path) -> RunSummary:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise MissingArtifactError(str(path), Stage.EVAL.value)
    return RunSummary(**read_json(path))


def compare_runs(run_dirs: Sequence[Path]) -> List[RunSummary]:
    """Load evaluated runs and attach gains over the seed-matched SFT run.

    All runs must share an eval set. Rows come back in method order
    (zero-shot, SFT, routing steering, routing-aligned), stable within a method.
    A run compared with itself gains zero.
    """
    if len(run_dirs) < 2:
        raise InsufficientDataError(f"Comparison needs at least 2 runs, got {len(run_dirs)}")
    summaries = [load_summary(d) for d in run_dirs]
    hashes = {s.eval_hash for s in summaries}
    if len(hashes) != 1:
        names = ", ".join(f"{s.run_name}={s.eval_hash[:12]}" for s in summaries)
        raise EvalSetMismatchError(f"Runs were evaluated on different eval sets: {names}")

    if len({s.run_name for s in summaries}) == 1:
        logger.info(f"Comparing {summaries[0].run_name} with itself: zero gains")
        return [s.model_copy(update={"relative_gain": 0.0}) for s in summaries]

    compared = []
    for s in summaries:
        sft = next(
            (
                t
                for t in summaries
                if t.method == Method.SFT.value and t.tgt_lang == s.tgt_lang and t.seed == s.seed
            ),
            None,
        )
        gain = relative_gain(s.target_accuracy, sft.target_accuracy) if sft else None
        compared.append(s.model_copy(update={"relative_gain": gain}))

    def order(summary: RunSummary) -> int:
        if summary.method in METHOD_ORDER:
            return METHOD_ORDER.index(summary.method)
        return len(METHOD_ORDER)

    return sorted(compared, key=order)


def ci_gain_correlation(summaries: Sequence[RunSummary]) -> Dict:
    """Pearson correlation of ci proportion against relative gain over routing-aligned runs."""
    points = [
        (s.ci_proportion, s.relative_gain)
        for s in summaries
        if s.method == Method.RA_MOE.value
        and s.ci_proportion is not None
        and s.relative_gain is not None
    ]
    result: Dict = {
        "n_points": len(points),
        "points": [list(p) for p in points],
        "r": None,
        "p": None,
    }
    try:
        r, p = pearson([x for x, _ in points], [y for _, y in points])
        result.update(r=r, p=p)
        logger.info(f"ci proportion vs relative gain: r={r:.3f}, p={p:.3g} over {len(points)} runs")
    except InsufficientDataError as e:
        logger.info(f"Correlation unavailable: {e}")
    return result


class RaMoePipeline:
    """Runs the pipeline stages against one output directory.

    Every stage reads its inputs from upstream stage directories and writes a
    fresh directory with a manifest; identical reruns reuse the existing one.
    """

    def __init__(self, config: PipelineConfig, out_dir: Path, identify_name: str = "identify"):
        self.config = config
        self.out = Path(out_dir)
        self.identify_name = identify_name
        logger.info(
            f"Initialized pipeline in {self.out} (method={config.method.value}, "
            f"target={config.target_language}, seed={config.train.seed})"
        )

    # Paths

    @property
    def corpus_dir(self) -> Path:
        return self.out / "corpus"

    @property
    def languages_path(self) -> Path:
        return self.corpus_dir / "languages.json"

    @property
    def base_checkpoint(self) -> Path:
        return self.out / "base" / "checkpoint.json"

    @property
    def categorize_dir(self) -> Path:
        return self.out / "categorize"

    @property
    def profile_dir(self) -> Path:
        return self.out / "profile"

    @property
    def expert_map_path(self) -> Path:
        return self.out / self.identify_name / "task_expert_map.json"

    def finetune_dir(self, run: str) -> Path:
        return self.out / "finetune" / run

    def eval_dir(self, run: str) -> Path:
        return self.out / "eval" / run

    def steer_name(self) -> str:
        return f"steer-{self.config.target_language}-d{self.config.steer_delta:g}"

    # Stage plumbing

    def run(self, stages: Optional[Sequence[Stage]] = None) -> List[Path]:
        """Run stages in order; an eval of a fine-tuned run also evaluates the base model."""
        paths = []
        for stage in stages or self.config.stages:
            paths.append(self.run_stage(stage))
            if Stage(stage) is Stage.EVAL and self.config.resolved_run_name != BASE_RUN:
                baseline = self.config.model_copy(update={"run_name": BASE_RUN})
                paths.append(RaMoePipeline(baseline, self.out, self.identify_name)._eval())
        return paths

    def run_stage(self, stage: Stage) -> Path:
        handlers: Dict[Stage, Callable[[], Path]] = {
            Stage.GEN_DATA: self._gen_data,
            Stage.PRETRAIN: self._pretrain,
            Stage.CATEGORIZE: self._categorize,
            Stage.PROFILE: self._profile,
            Stage.IDENTIFY: self._identify,
            Stage.FINETUNE: self._finetune,
            Stage.EVAL: self._eval,
            Stage.STEER: self._steer,
            Stage.REPORT: self._report,
            Stage.FLOPS: self._flops,
            Stage.SWEEP: self._sweep,
        }
        return handlers[Stage(stage)]()

    def _execute(
        self,
        stage: Stage,
        path: Path,
        config_doc: Mapping,
        inputs: Sequence[Tuple[Path, Stage]],
        build: Callable[[Path], None],
    ) -> Path:
        directory = StageDirectory(
            self.out, path, stage.value, dict(config_doc), [(p, s.value) for p, s in inputs]
        )
        if directory.is_complete():
            return path
        logger.info(f"Running stage '{stage.value}' into {path}")
        with timed(f"Stage '{stage.value}'"):
            work = directory.begin()
            try:
                build(work)
            except Exception as e:
                logger.error(f"Stage '{stage.value}' failed: {e}")
                raise
            directory.finalize()
        return path

    # Shared loaders

    def _languages(self) -> Dict[str, LanguageSpec]:
        return {lang.name: lang for lang in load_languages(self.languages_path)}

    def _labeled(self) -> List[ParallelExample]:
        examples = read_jsonl(self.categorize_dir / "labeled.jsonl", ParallelExample)
        target = [ex for ex in examples if ex.tgt_lang == self.config.target_language]
        if not target:
            raise ConfigurationError(
                f"No categorized examples for target language {self.config.target_language!r}"
            )
        return target

    def _eval_examples(self) -> List[ParallelExample]:
        examples = read_jsonl(self.corpus_dir / "eval_parallel.jsonl", ParallelExample)
        return [ex for ex in examples if ex.tgt_lang == self.config.target_language]

    def _eval_hash(self) -> str:
        return hash_config(
            {
                "eval": sha256_file(self.corpus_dir / "eval_parallel.jsonl"),
                "target": self.config.target_language,
            }
        )

    def _task_src_dists(self, src_lang: str) -> Dict[str, SeqRoutingDist]:
        dists = load_dists(self.profile_dir / "task_routing.jsonl")
        return {d.id: d for d in dists if d.lang == src_lang}

    def _eval_profile(
        self,
        model: MoELanguageModel,
        examples: Sequence[ParallelExample],
        langs: Mapping[str, LanguageSpec],
        tgt_bias: Optional[RouterBias] = None,
    ) -> DivergenceProfile:
        """Divergence between teacher-forced gold source and target responses."""
        eos = model.config.eos_id
        src, tgt = [], []
        for ex in examples:
            src_trace = teacher_force_trace(
                model, ex.prompt_src, gold_response(ex, langs[ex.src_lang], eos)
            )
            tgt_trace = teacher_force_trace(
                model, ex.prompt_tgt, gold_response(ex, langs[ex.tgt_lang], eos), tgt_bias
            )
            src.append(seq_routing_dist(src_trace, ex.id, ex.src_lang))
            tgt.append(seq_routing_dist(tgt_trace, ex.id, ex.tgt_lang))
        return divergence_profile(src, tgt)

    def _ci_proportion(self) -> Optional[float]:
        reports = read_json(self.categorize_dir / "taxonomy.json")
        report = reports.get(self.config.target_language)
        return TaxonomyReport(**report).ci_proportion if report else None

    # Stages

    def _gen_data(self) -> Path:
        cfg = self.config

        def build(work: Path) -> None:
            langs = LanguageFactory.create_all_languages(cfg.corpus, cfg.model.vocab_size)
            corpus = gen_corpus(cfg.corpus, langs, cfg.model.eos_id)
            save_languages(langs, work / "languages.json")
            save_corpus(corpus, work)

        doc = {"corpus": cfg.corpus.model_dump(mode="json"), "vocab_size": cfg.model.vocab_size}
        return self._execute(Stage.GEN_DATA, self.corpus_dir, doc, [], build)

    def _pretrain(self) -> Path:
        cfg = self.config
        corpus_file = self.corpus_dir / "pretrain.jsonl"

        def build(work: Path) -> None:
            samples = read_jsonl(corpus_file, TextSample)
            model = pretrain(cfg.model, samples, cfg.pretrain)
            save_checkpoint(model, work / "checkpoint.json")

        doc = {
            "model": cfg.model.model_dump(mode="json"),
            "pretrain": cfg.pretrain.model_dump(mode="json"),
        }
        return self._execute(
            Stage.PRETRAIN, self.base_checkpoint.parent, doc, [(corpus_file, Stage.GEN_DATA)], build
        )

    def _categorize(self) -> Path:
        cfg = self.config
        task_file = self.corpus_dir / "task_parallel.jsonl"

        def build(work: Path) -> None:
            model = load_checkpoint(self.base_checkpoint)
            langs = self._languages()
            examples = read_jsonl(task_file, ParallelExample)
            result = categorize(examples, model, langs, cfg.max_new_tokens, cfg.judge)
            write_jsonl(work / "labeled.jsonl", result.examples)

            dists = []
            for ex in result.examples:
                for lang, trace in zip((ex.src_lang, ex.tgt_lang), result.traces[ex.id]):
                    if trace.generated_positions:
                        dists.append(seq_routing_dist(trace, ex.id, lang))
                    else:
                        logger.debug(f"No generated tokens for {ex.id} ({lang})")
            save_dists(work / "routing.jsonl", dists)

            reports = {}
            for target in sorted({ex.tgt_lang for ex in result.examples}):
                subset = [ex for ex in result.examples if ex.tgt_lang == target]
                excluded = sum(1 for ex in subset if ex.ppl_excluded)
                report = TaxonomyReport.from_labels([ex.label for ex in subset], excluded)
                reports[target] = report.model_dump(mode="json")
                logger.info(f"{target}: ci proportion {report.ci_proportion:.3f}")
            write_json(work / "taxonomy.json", reports)

        doc = {"judge": cfg.judge.value, "max_new_tokens": cfg.max_new_tokens}
        inputs = [
            (self.base_checkpoint, Stage.PRETRAIN),
            (task_file, Stage.GEN_DATA),
            (self.languages_path, Stage.GEN_DATA),
        ]
        return self._execute(Stage.CATEGORIZE, self.categorize_dir, doc, inputs, build)

    def _profile(self) -> Path:
        cfg = self.config
        general_file = self.corpus_dir / "general.jsonl"
        decoded_file = self.categorize_dir / "routing.jsonl"

        def build(work: Path) -> None:
            model = load_checkpoint(self.base_checkpoint)
            examples = self._labeled()
            src_lang = examples[0].src_lang
            src: Dict[str, SeqRoutingDist] = {}
            tgt: Dict[str, SeqRoutingDist] = {}
            if cfg.reuse_decode_traces:
                for d in load_dists(decoded_file):
                    if d.lang == src_lang:
                        src[d.id] = d
                    elif d.lang == cfg.target_language:
                        tgt[d.id] = d
            else:
                for ex in examples:
                    for side, prompt, response, lang in (
                        (src, ex.prompt_src, ex.response_src, ex.src_lang),
                        (tgt, ex.prompt_tgt, ex.response_tgt, ex.tgt_lang),
                    ):
                        if response:
                            trace = teacher_force_trace(model, prompt, response)
                            side[ex.id] = seq_routing_dist(trace, ex.id, lang)

            ids = [ex.id for ex in examples if ex.id in src and ex.id in tgt]
            profile = divergence_profile([src[i] for i in ids], [tgt[i] for i in ids])
            logger.info(
                "Divergence profile: " + ", ".join(f"{v:.4f}" for v in profile.values)
            )

            general = []
            for idx, sample in enumerate(read_jsonl(general_file, TextSample)):
                trace = teacher_force_trace(model, sample.tokens[:1], sample.tokens[1:])
                general.append(seq_routing_dist(trace, f"general-{idx:05d}", sample.lang))

            save_dists(work / "task_routing.jsonl", [src[i] for i in ids] + [tgt[i] for i in ids])
            save_dists(work / "general_routing.jsonl", general)
            write_json(work / "profile.json", profile.model_dump(mode="json"))

        doc = {
            "target_language": cfg.target_language,
            "reuse_decode_traces": cfg.reuse_decode_traces,
        }
        inputs = [
            (self.base_checkpoint, Stage.PRETRAIN),
            (self.categorize_dir / "labeled.jsonl", Stage.CATEGORIZE),
            (decoded_file, Stage.CATEGORIZE),
            (general_file, Stage.GEN_DATA),
        ]
        return self._execute(Stage.PROFILE, self.profile_dir, doc, inputs, build)

    def _identify(self) -> Path:
        cfg = self.config
        transfer = Path(cfg.expert_map_path) if cfg.expert_map_path else None

        def build(work: Path) -> None:
            examples = self._labeled()
            src_dists = self._task_src_dists(examples[0].src_lang)
            src_correct = [
                src_dists[ex.id]
                for ex in examples
                if ex.label in (TaxonomyLabel.CC, TaxonomyLabel.CI) and ex.id in src_dists
            ]
            ci_ids = [
                ex.id for ex in examples if ex.label is TaxonomyLabel.CI and ex.id in src_dists
            ]
            logger.info(
                f"Identifying task experts from {len(src_correct)} source-correct examples, "
                f"{len(ci_ids)} ci references"
            )
            expert_map = identify_task_experts(
                profile=DivergenceProfile(**read_json(self.profile_dir / "profile.json")),
                dists_task=src_correct,
                dists_gen=load_dists(self.profile_dir / "general_routing.jsonl"),
                reference_ids=ci_ids,
                src_dists=src_dists,
                k=cfg.train.k_experts,
                percentile=cfg.threshold_percentile,
                transfer_from=TaskExpertMap.load(transfer) if transfer else None,
            )
            expert_map.save(work / "task_expert_map.json")

        doc = {
            "k_experts": cfg.train.k_experts,
            "threshold_percentile": cfg.threshold_percentile,
            "target_language": cfg.target_language,
        }
        inputs = [
            (self.profile_dir / "profile.json", Stage.PROFILE),
            (self.profile_dir / "task_routing.jsonl", Stage.PROFILE),
            (self.profile_dir / "general_routing.jsonl", Stage.PROFILE),
            (self.categorize_dir / "labeled.jsonl", Stage.CATEGORIZE),
        ]
        if transfer:
            inputs.append((transfer, Stage.IDENTIFY))
        return self._execute(Stage.IDENTIFY, self.expert_map_path.parent, doc, inputs, build)

    def _finetune(self) -> Path:
        cfg = self.config
        run = cfg.resolved_run_name

        def build(work: Path) -> None:
            base = load_checkpoint(self.base_checkpoint)
            langs = self._languages()
            examples = self._labeled()
            expert_map = TaskExpertMap.load(self.expert_map_path)
            if cfg.train.no_ci_filter:
                src_dists = self._task_src_dists(examples[0].src_lang)
                ids = [ex.id for ex in examples if ex.id in src_dists]
                references = build_reference_store(ids, src_dists, sorted(expert_map.experts))
                expert_map = expert_map.model_copy(update={"references": references})

            model, metrics = finetune(
                base, examples, langs, expert_map, cfg.train, eval_examples=self._eval_examples()
            )
            write_json(work / "config.json", cfg.train.model_dump(mode="json"))
            write_json(
                work / "run.json",
                {
                    "method": cfg.method.value,
                    "target_language": cfg.target_language,
                    "seed": cfg.train.seed,
                    "epoch_loss_ce": metrics.epoch_loss_ce,
                    "n_steps": metrics.n_steps,
                    "n_fallbacks": metrics.n_fallbacks,
                },
            )
            write_jsonl(work / "metrics.jsonl", metrics.records)
            save_checkpoint(model, work / "checkpoint.json")

        doc = {
            "train": cfg.train.model_dump(mode="json"),
            "method": cfg.method.value,
            "target_language": cfg.target_language,
        }
        inputs = [
            (self.base_checkpoint, Stage.PRETRAIN),
            (self.categorize_dir / "labeled.jsonl", Stage.CATEGORIZE),
            (self.expert_map_path, Stage.IDENTIFY),
            (self.languages_path, Stage.GEN_DATA),
            (self.corpus_dir / "eval_parallel.jsonl", Stage.GEN_DATA),
        ]
        if cfg.train.no_ci_filter:
            inputs.append((self.profile_dir / "task_routing.jsonl", Stage.PROFILE))
        return self._execute(Stage.FINETUNE, self.finetune_dir(run), doc, inputs, build)

    def _evaluate(
        self,
        work: Path,
        run: str,
        method: str,
        seed: int,
        model: MoELanguageModel,
        steer_delta: Optional[float] = None,
    ) -> RunSummary:
        cfg = self.config
        langs = self._languages()
        examples = self._eval_examples()
        expert_map = TaskExpertMap.load(self.expert_map_path)
        base = load_checkpoint(self.base_checkpoint)

        decoder = None
        bias = None
        if steer_delta is not None:
            bias = steer_bias(expert_map, steer_delta)
            decoder = lambda prompt: routing_steer_decode(  # noqa: E731
                model, prompt, expert_map, steer_delta, cfg.max_new_tokens
            )
        src_eval = evaluate_side(model, examples, langs, "src", cfg.max_new_tokens)
        tgt_eval = evaluate_side(model, examples, langs, "tgt", cfg.max_new_tokens, decoder)
        profile_after = self._eval_profile(model, examples, langs, bias)
        profile_before = self._eval_profile(base, examples, langs)

        summary = RunSummary(
            run_name=run,
            method=method,
            tgt_lang=cfg.target_language,
            seed=seed,
            eval_hash=self._eval_hash(),
            accuracy={
                examples[0].src_lang: src_eval.accuracy,
                cfg.target_language: tgt_eval.accuracy,
            },
            ci_proportion=self._ci_proportion(),
            mid_divergence=profile_after.segment_mean(expert_map.mid_layers),
            selection_rate=selection_rate(tgt_eval.traces, expert_map, model.config.top_k),
            mid_layers=expert_map.mid_layers,
            profile_before=profile_before,
            profile_after=profile_after,
        )
        write_json(work / "summary.json", summary.model_dump(mode="json"))
        logger.info(
            f"{run}: target accuracy {tgt_eval.accuracy:.3f}, source accuracy "
            f"{src_eval.accuracy:.3f}, mid-layer divergence {summary.mid_divergence:.4f}"
        )
        return summary

    def _eval(self) -> Path:
        cfg = self.config
        run = cfg.resolved_run_name
        checkpoint = (
            self.base_checkpoint
            if run == BASE_RUN
            else self.finetune_dir(run) / "checkpoint.json"
        )
        run_info = self.finetune_dir(run) / "run.json"

        def build(work: Path) -> None:
            if run == BASE_RUN:
                method, seed = BASE_RUN, cfg.pretrain.seed
            else:
                info = read_json(run_info)
                method, seed = info["method"], info["seed"]
            self._evaluate(work, run, method, seed, load_checkpoint(checkpoint))

        doc = {
            "run": run,
            "max_new_tokens": cfg.max_new_tokens,
            "target_language": cfg.target_language,
        }
        inputs = [
            (checkpoint, Stage.PRETRAIN if run == BASE_RUN else Stage.FINETUNE),
            (self.base_checkpoint, Stage.PRETRAIN),
            (self.corpus_dir / "eval_parallel.jsonl", Stage.GEN_DATA),
            (self.languages_path, Stage.GEN_DATA),
            (self.expert_map_path, Stage.IDENTIFY),
            (self.categorize_dir / "taxonomy.json", Stage.CATEGORIZE),
        ]
        if run != BASE_RUN:
            inputs.append((run_info, Stage.FINETUNE))
        return self._execute(Stage.EVAL, self.eval_dir(run), doc, inputs, build)

    def _steer(self) -> Path:
        cfg = self.config
        name = self.steer_name()

        def build(work: Path) -> None:
            model = load_checkpoint(self.base_checkpoint)
            self._evaluate(
                work, name, "routing-steering", cfg.pretrain.seed, model, cfg.steer_delta
            )

        doc = {
            "steer_delta": cfg.steer_delta,
            "max_new_tokens": cfg.max_new_tokens,
            "target_language": cfg.target_language,
        }
        inputs = [
            (self.base_checkpoint, Stage.PRETRAIN),
            (self.corpus_dir / "eval_parallel.jsonl", Stage.GEN_DATA),
            (self.languages_path, Stage.GEN_DATA),
            (self.expert_map_path, Stage.IDENTIFY),
            (self.categorize_dir / "taxonomy.json", Stage.CATEGORIZE),
        ]
        return self._execute(Stage.STEER, self.out / "steer" / name, doc, inputs, build)

    def _run_dir(self, run: str) -> Path:
        for parent in ("eval", "steer"):
            candidate = self.out / parent / run
            if (candidate / "summary.json").exists():
                return candidate
        raise MissingArtifactError(str(self.eval_dir(run) / "summary.json"), Stage.EVAL.value)

    def _discover_runs(self) -> List[str]:
        runs = []
        for parent in ("eval", "steer"):
            root = self.out / parent
            if root.exists():
                runs += sorted(p.name for p in root.iterdir() if (p / MANIFEST_NAME).exists())
        return runs

    def _report(self) -> Path:
        runs = list(self.config.report_runs) or self._discover_runs()
        if len(runs) < 2:
            raise InsufficientDataError(f"Report needs at least 2 evaluated runs, found {runs}")
        run_dirs = [self._run_dir(run) for run in runs]

        def build(work: Path) -> None:
            summaries = compare_runs(run_dirs)
            table = format_summary_table(summaries)
            atomic_write_text(work / "table.txt", table)
            write_json(work / "summaries.json", [s.model_dump(mode="json") for s in summaries])
            logger.info("Run comparison:\n" + table)

            profiled = [s for s in summaries if s.profile_after is not None]
            if profiled and profiled[0].mid_layers is not None:
                profiles = {BASE_RUN: profiled[0].profile_before}
                profiles.update({s.run_name: s.profile_after for s in profiled})
                divergence_report(profiles, profiled[0].mid_layers).save(work)
            write_json(work / "correlation.json", ci_gain_correlation(summaries))

        doc = {"runs": runs}
        inputs = [(d / "summary.json", Stage.EVAL) for d in run_dirs]
        path = self.out / "report" / hash_config(runs)[:12]
        return self._execute(Stage.REPORT, path, doc, inputs, build)

    def _flops(self) -> Path:
        cfg = self.config
        desk = FlopsInput(
            B=cfg.train.batch_size * cfg.model.max_seq_len,
            L=cfg.model.n_layers,
            K=cfg.model.top_k,
            d_m=cfg.model.d_model,
            d_e=cfg.model.d_expert,
            r=cfg.train.adapter_rank,
            E=cfg.model.n_experts,
        )

        def build(work: Path) -> None:
            document = {}
            for name, inp in (("reference", cfg.flops), ("desk", desk)):
                estimate = flops_estimate(inp)
                document[name] = {
                    "input": inp.model_dump(),
                    "flops": estimate.model_dump(),
                    "gflops": estimate.gflops(),
                }
                gflops = estimate.gflops()
                logger.info(
                    f"{name} FLOPs: base {gflops['base']} GFLOPs, adapters {gflops['lora']} "
                    f"GFLOPs, alignment {estimate.align} FLOPs"
                )
            write_json(work / "flops.json", document)

        doc = {"reference": cfg.flops.model_dump(), "desk": desk.model_dump()}
        return self._execute(Stage.FLOPS, self.out / "flops", doc, [], build)

    def _sweep(self) -> Path:
        cfg = self.config
        n_experts = cfg.model.n_experts
        grid = [(lam, cfg.train.k_experts) for lam in cfg.sweep_lambdas]
        grid += [(1.0, min(k, n_experts)) for k in cfg.sweep_ks]
        grid = list(dict.fromkeys(grid))

        runs = []
        for lam, k in grid:
            name = f"sweep-{cfg.target_language}-s{cfg.train.seed}-l{lam:g}-k{k}"
            variant = apply_overrides(
                cfg, lambda_align=lam, k_experts=k, method=Method.RA_MOE, run_name=name
            )
            # Each K has its own task-expert map
            identify_name = "identify" if k == cfg.train.k_experts else f"identify-k{k}"
            sub = RaMoePipeline(variant, self.out, identify_name)
            sub.run_stage(Stage.IDENTIFY)
            sub.run_stage(Stage.FINETUNE)
            sub.run_stage(Stage.EVAL)
            runs.append((lam, k, sub.eval_dir(name)))

        def build(work: Path) -> None:
            rows = []
            for lam, k, run_dir in runs:
                s = load_summary(run_dir)
                rows.append(
                    {
                        "lambda": lam,
                        "k": k,
                        "run": s.run_name,
                        "target_accuracy": s.target_accuracy,
                        "mid_divergence": s.mid_divergence,
                        "selection_rate": s.selection_rate,
                    }
                )
            write_json(work / "sweep.json", rows)
            lines = ["lambda,k,run,target_accuracy,mid_divergence,selection_rate"]
            lines += [
                f"{r['lambda']!r},{r['k']},{r['run']},{r['target_accuracy']!r},"
                f"{r['mid_divergence']!r},{r['selection_rate']!r}"
                for r in rows
            ]
            atomic_write_text(work / "sweep.csv", "\n".join(lines) + "\n")

        doc = {"grid": [list(g) for g in grid], "target_language": cfg.target_language}
        inputs = [(run_dir / "summary.json", Stage.EVAL) for _, _, run_dir in runs]
        sweep_dir = self.out / "sweep" / f"s{cfg.train.seed}"
        return self._execute(Stage.SWEEP, sweep_dir, doc, inputs, build)
