"""Synthetic apps-as-traces with planted ML pipelines, and synthetic score
datasets with planted group disparities. Every generator records the ground
truth it planted so tests can check recovery against it."""

from __future__ import annotations

import json
import random
import string
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ml_detector import KeywordSet
from .pipeline_recon import JumpRecord, NodeId, Role, format_frame
from .trace_core import (BLOB_CAP, RecordKind, TraceRecord, TypedValue, TypeKind, encode_args,
                         encode_return, parse_shorty, serialize_record)

INPUT, PREPROCESS, MODEL, REGISTER, CALLBACK, HANDLER, SINK = (
    "InputSource", "Preprocess", "ModelEntry", "OutputRegister", "Callback", "JavaHandler", "Sink")
STAGES = (INPUT, PREPROCESS, MODEL, REGISTER, CALLBACK, HANDLER, SINK)
DEFAULT_TOPOLOGY = STAGES

_STAGE_ROLE = {INPUT: Role.INPUT_SOURCE, PREPROCESS: Role.PREPROCESS, MODEL: Role.MODEL_ENTRY,
               REGISTER: Role.OUTPUT_REGISTER, CALLBACK: Role.CALLBACK, SINK: Role.SINK}
_STAGE_LIB = {INPUT: "libeffect.so", PREPROCESS: "libeffect.so", MODEL: "libbytenn.so",
              REGISTER: "libeffect.so", CALLBACK: "libeffect.so", HANDLER: None, SINK: None}
_STAGE_NAME = {
    INPUT: "effect_camera_frame_hook",
    PREPROCESS: "effect_preprocess_frame",
    MODEL: "bytenn_forward",
    REGISTER: "effect_result_register_store",
    CALLBACK: "effect_post_message",
    HANDLER: "com.example.effect.MessageCenter.onNativeMessage",
    SINK: "com.example.effect.LogWriter.append",
}
_STAGE_SHORTY = {INPUT: "VLJ", PREPROCESS: "ZLII", MODEL: "ILL", REGISTER: "VJL",
                 HANDLER: "VIJ", SINK: "ZJ"}

PIPE_PID = 4100
PIPE_TID = 4133
JAVA_TID = 4100

_BG_SHORTIES = ("V", "VI", "IL", "ZL", "VLI", "JJ", "LL", "DD", "VLZ", "IIJ", "VJL", "FFF",
                "LIL", "ZI", "SCB", "VL", "DJL", "IIII")
_BG_LIBS = ("libc.so", "libart.so", "libhwui.so", "libgui.so")
_BG_CLASSES = ("android.os.Handler", "android.view.View", "java.lang.String", "java.util.HashMap",
               "android.graphics.Canvas", "java.lang.Thread", "android.widget.TextView",
               "java.io.FileOutputStream", "android.app.Activity", "java.util.ArrayList")
_BG_METHODS = ("dispatchMessage", "invalidate", "length", "get", "put", "drawRect", "run",
               "setText", "write", "onResume", "add", "size", "hashCode", "equals", "post")
_BG_NATIVE = ("memcpy", "malloc", "free", "pthread_mutex_lock", "strlen", "art_quick_invoke",
              "SkCanvas_drawRect", "eglSwapBuffers", "ioctl", "read", "write")
_BG_EVENTS = ("tap", "scroll", "focus", "pause", "swipe", "visible")


@dataclass(frozen=True)
class JumpPlant:
    """A runtime-resolved branch in the function at ``source``.

    ``targets`` are topology positions; ``None`` plants a side function that
    is not part of the pipeline. The destination alternates across frames.
    """
    source: int
    targets: tuple


@dataclass
class SyntheticAppPlan:
    n_background_functions: int = 10_000  # background invocations emitted
    pipeline_topology: tuple = DEFAULT_TOPOLOGY
    obfuscate_names: bool = False
    n_frames: int = 20
    jump_branches: tuple = ()
    second_model_input: bool = False
    background_pool: int = 300
    seed: int = 0

    def __post_init__(self):
        topo = tuple(self.pipeline_topology)
        self.pipeline_topology = topo
        self.jump_branches = tuple(
            j if isinstance(j, JumpPlant) else JumpPlant(int(j[0]), tuple(j[1])) for j in self.jump_branches)
        if any(s not in STAGES for s in topo):
            raise ValueError(f"unknown stage in topology {topo}")
        if topo.count(MODEL) != 1:
            raise ValueError("topology needs exactly one ModelEntry")
        if SINK not in topo:
            raise ValueError("topology needs a Sink")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        for j in self.jump_branches:
            if not 0 <= j.source < len(topo) or _STAGE_LIB[topo[j.source]] is None:
                raise ValueError("jump source must be a native stage")
            for t in j.targets:
                if t is None:
                    continue
                if t != j.source + 1 or t >= len(topo) - 1:
                    raise ValueError("jump targets must be the next stage and not the last")
                if _STAGE_LIB[topo[t]] != _STAGE_LIB[topo[j.source]]:
                    raise ValueError("jump target must live in the source's library")

    @classmethod
    def acceptance(cls, seed: int, second_model_input: bool = True) -> "SyntheticAppPlan":
        """Obfuscated 7-stage plan with one two-way jump out of the input hook."""
        topo = DEFAULT_TOPOLOGY
        i = topo.index(INPUT)
        return cls(10_000, topo, True, 20, (JumpPlant(i, (i + 1, None)),), second_model_input, 300, seed)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticAppPlan":
        d = dict(d)
        if "pipeline_topology" in d:
            d["pipeline_topology"] = tuple(d["pipeline_topology"])
        topo = d.get("pipeline_topology", DEFAULT_TOPOLOGY)

        def pos(x):
            # stage names are accepted in place of topology positions
            return topo.index(x) if isinstance(x, str) else x

        if "jump_branches" in d:
            d["jump_branches"] = tuple(
                JumpPlant(pos(j["source"]), tuple(None if t is None else pos(t) for t in j["targets"]))
                if isinstance(j, dict) else j
                for j in d["jump_branches"])
        return cls(**d)


@dataclass
class GroundTruth:
    pipeline_nodes: list[str]
    pipeline_edges: list[tuple[str, str]]
    callback_node: str
    evidence_indices: list[int]
    jump_records: list[JumpRecord]
    payloads: list[dict]
    roles: dict[str, list[str]]
    inputs: list[str]
    sinks: list[str]
    model_node: str
    second_input: str | None = None
    side_nodes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["jump_records"] = [j.to_dict() for j in self.jump_records]
        d["pipeline_edges"] = [list(e) for e in self.pipeline_edges]
        return d


class _Names:
    def __init__(self, rng: random.Random, obfuscate: bool, keywords: KeywordSet):
        self.rng = rng
        self.obfuscate = obfuscate
        self.kw = keywords
        self.used: set[str] = set()

    def _random_ident(self, java: bool) -> str:
        letters = string.ascii_lowercase
        while True:
            if java:
                name = ".".join(
                    "".join(self.rng.choice(letters) for _ in range(self.rng.randint(1, 2)))
                    for _ in range(3))
            else:
                name = "".join(self.rng.choice(letters + string.digits) for _ in range(3))
                if name[0].isdigit():
                    continue
            if name not in self.used and not self.kw.matches(name):
                return name

    def get(self, plain: str, java: bool) -> str:
        name = self._random_ident(java) if self.obfuscate else plain
        if name in self.used:
            base, i = name, 2
            while f"{base}{i}" in self.used:
                i += 1
            name = f"{base}{i}"
        self.used.add(name)
        return name


def random_value(kind: TypeKind, rng: random.Random, trailing: bool = False) -> TypedValue:
    if kind is TypeKind.BOOL:
        return TypedValue(kind, rng.random() < 0.5)
    if kind is TypeKind.BYTE:
        return TypedValue(kind, rng.randint(-128, 127))
    if kind is TypeKind.SHORT:
        return TypedValue(kind, rng.randint(-32768, 32767))
    if kind is TypeKind.CHAR:
        return TypedValue(kind, rng.randint(0, 0xFFFF))
    if kind is TypeKind.INT:
        return TypedValue(kind, rng.randint(-2**31, 2**31 - 1))
    if kind is TypeKind.LONG:
        return TypedValue(kind, rng.randint(-2**63, 2**63 - 1))
    if kind is TypeKind.FLOAT:
        (f,) = struct.unpack("<f", struct.pack("<f", rng.uniform(-1e6, 1e6)))
        return TypedValue(kind, f)
    if kind is TypeKind.DOUBLE:
        return TypedValue(kind, rng.uniform(-1e9, 1e9))
    if kind is TypeKind.POINTER:
        n = rng.randint(0, 64) if trailing else 4
        return TypedValue(kind, rng.randbytes(n))
    return TypedValue(kind, None)


def _random_call(shorty: str, is_static: bool, rng: random.Random) -> tuple[bytes, bytes]:
    sig = parse_shorty(shorty)
    vals = [random_value(k, rng, i == len(sig.arg_kinds) - 1) for i, k in enumerate(sig.arg_kinds)]
    ret = random_value(sig.return_kind, rng)
    return encode_args(vals, is_static), encode_return(ret)


@dataclass
class _BgFunc:
    node: NodeId
    offset: int | None
    kind: RecordKind
    shorty: str
    is_static: bool


def _background_pool(rng: random.Random, names: _Names, size: int) -> list[_BgFunc]:
    pool = []
    lib_next = {lib: 0x1000 for lib in _BG_LIBS}
    for _ in range(size):
        native = rng.random() < 0.4
        if native:
            lib = rng.choice(_BG_LIBS)
            name = names.get(rng.choice(_BG_NATIVE), java=False)
            lib_next[lib] += rng.randrange(0x100, 0x800, 0x10)
            pool.append(_BgFunc(NodeId(name, lib), lib_next[lib], RecordKind.JNI,
                                rng.choice(_BG_SHORTIES), True))
        else:
            plain = f"{rng.choice(_BG_CLASSES)}.{rng.choice(_BG_METHODS)}"
            pool.append(_BgFunc(NodeId(names.get(plain, java=True)), None, RecordKind.QUICK,
                                rng.choice(_BG_SHORTIES), rng.random() < 0.3))
    return pool


def _background_record(fn: _BgFunc, pool: list[_BgFunc], rng: random.Random) -> dict:
    """Fields of one noise invocation; timestamps are filled in later."""
    stack = None
    if rng.random() < 0.5:
        callers = [rng.choice(pool) for _ in range(rng.randint(0, 2))]
        stack = tuple(format_frame(f.node, f.offset) for f in [fn, *callers])
    if rng.random() < 0.08:
        body = {"event": rng.choice(_BG_EVENTS), "seq": rng.randint(0, 10_000),
                "x": rng.randint(2, 1080), "y": rng.randint(2, 2340)}
        if rng.random() < 0.3:
            body["flags"] = [rng.randint(0, 1) for _ in range(4)]
        return dict(kind=RecordKind.CALLBACK, function_name=fn.node.name, library=fn.node.library,
                    offset=fn.offset, payload=json.dumps(body), stack=stack)
    args, ret = _random_call(fn.shorty, fn.is_static, rng)
    return dict(kind=fn.kind, function_name=fn.node.name, library=fn.node.library,
                offset=fn.offset, is_static=fn.is_static, shorty=fn.shorty,
                raw_args=args, raw_return=ret, stack=stack)


def _planted_payload(rng: random.Random) -> dict:
    x0, y0 = rng.uniform(0.05, 0.45), rng.uniform(0.05, 0.45)
    x1, y1 = x0 + rng.uniform(0.2, 0.5), y0 + rng.uniform(0.2, 0.5)
    return {"face_count": 1, "bbox": [round(v, 4) for v in (x0, y0, x1, y1)],
            "age": rng.randint(1, 80), "boy_prob": round(rng.uniform(0.01, 0.99), 4)}


def generate_trace(plan: SyntheticAppPlan) -> tuple[list[str], GroundTruth]:
    rng = random.Random(plan.seed)
    names = _Names(rng, plan.obfuscate_names, KeywordSet.default())
    topo = plan.pipeline_topology

    lib_cursor: dict[str, int] = {}

    def place(lib):
        if lib is None:
            return None
        lib_cursor[lib] = lib_cursor.get(lib, 0x2000) + rng.randrange(0x200, 0x1000, 0x10)
        return lib_cursor[lib]

    nodes, offsets = [], []
    for stage in topo:
        lib = _STAGE_LIB[stage]
        nodes.append(NodeId(names.get(_STAGE_NAME[stage], java=lib is None), lib))
        offsets.append(place(lib))
    jump_in = {t: j for j in plan.jump_branches for t in j.targets if t is not None}
    side: dict[int, tuple[NodeId, int]] = {}
    for j in plan.jump_branches:
        if None in j.targets:
            lib = nodes[j.source].library
            side[j.source] = (NodeId(names.get("debug_stats_collect", java=False), lib), place(lib))
    feed = None
    if plan.second_model_input:
        feed = NodeId(names.get("com.example.feed.InteractionTracker.snapshot", java=True))

    def frame(i):
        return format_frame(nodes[i], offsets[i])

    pipeline: list[list[dict]] = []
    payloads = []
    jump_obs: dict[tuple[str, int, int], int] = {}
    for f in range(plan.n_frames):
        recs = []
        for i, stage in enumerate(topo):
            if i in jump_in:
                continue  # reached only through a runtime jump; seen in the next stack
            stack = [frame(i)]
            j = i
            while j > 0 and j not in jump_in and len(stack) < 3:
                j -= 1
                stack.append(frame(j))
            base = dict(function_name=nodes[i].name, library=nodes[i].library,
                        offset=offsets[i], stack=tuple(stack), pipe=True)
            if stage == CALLBACK:
                payload = _planted_payload(rng)
                payloads.append(payload)
                recs.append(dict(base, kind=RecordKind.CALLBACK, payload=json.dumps(payload),
                                 planted=True))
            else:
                shorty = _STAGE_SHORTY[stage]
                args, ret = _random_call(shorty, True, rng)
                kind = RecordKind.JNI if nodes[i].library else RecordKind.QUICK
                recs.append(dict(base, kind=kind, shorty=shorty, raw_args=args, raw_return=ret))
            if stage == MODEL and feed is not None:
                args, ret = _random_call(_STAGE_SHORTY[MODEL], True, rng)
                recs.append(dict(function_name=nodes[i].name, library=nodes[i].library,
                                 offset=offsets[i], stack=(frame(i), str(feed)), pipe=True,
                                 kind=RecordKind.JNI, shorty=_STAGE_SHORTY[MODEL],
                                 raw_args=args, raw_return=ret))
        for j in plan.jump_branches:
            target = j.targets[f % len(j.targets)]
            lib = nodes[j.source].library
            branch = offsets[j.source] + 0x24
            if target is None:
                snode, soff = side[j.source]
                dest = soff
                args, ret = _random_call("VI", True, rng)
                recs.append(dict(function_name=snode.name, library=lib, offset=soff,
                                 stack=(format_frame(snode, soff),), pipe=True, kind=RecordKind.JNI,
                                 shorty="VI", raw_args=args, raw_return=ret))
            else:
                dest = offsets[target]
            jump_obs[(lib, branch, dest)] = jump_obs.get((lib, branch, dest), 0) + 1
        pipeline.append(recs)

    pool = _background_pool(rng, names, max(1, plan.background_pool))
    background = [_background_record(rng.choice(pool), pool, rng)
                  for _ in range(plan.n_background_functions)]

    # interleave: each background call lands before a random pipeline frame or at the end
    slots: list[list[dict]] = [[] for _ in range(plan.n_frames + 1)]
    for rec in background:
        slots[rng.randint(0, plan.n_frames)].append(rec)
    ordered: list[dict] = []
    for f in range(plan.n_frames):
        ordered += slots[f]
        ordered += pipeline[f]
    ordered += slots[plan.n_frames]

    lines, evidence_idx = [], []
    ts = 1_000_000_000
    bg_tids = (4101, 4102, 4107, 4120)
    for idx, d in enumerate(ordered):
        ts += rng.randint(1_000, 50_000)
        pipe = d.pop("pipe", False)
        if d.pop("planted", False):
            evidence_idx.append(idx)
        if pipe:
            tid = JAVA_TID if d["library"] is None else PIPE_TID
        else:
            tid = rng.choice(bg_tids)
        lines.append(serialize_record(TraceRecord(ts, PIPE_PID, tid, **d)))

    edges = []
    for i in range(len(topo) - 1):
        edges.append((str(nodes[i]), str(nodes[i + 1])))
    if feed is not None:
        edges.append((str(feed), str(nodes[topo.index(MODEL)])))
    roles: dict[str, list[str]] = {}
    for n, stage in zip(nodes, topo):
        if stage in (INPUT, SINK):
            roles.setdefault(str(n), []).append(_STAGE_ROLE[stage].value)
    truth = GroundTruth(
        pipeline_nodes=[str(n) for n in nodes],
        pipeline_edges=edges,
        callback_node=str(nodes[topo.index(CALLBACK)]) if CALLBACK in topo else "",
        evidence_indices=evidence_idx,
        jump_records=[JumpRecord(lib, b, d, n) for (lib, b, d), n in sorted(jump_obs.items())],
        payloads=payloads,
        roles=roles,
        inputs=[str(n) for n, s in zip(nodes, topo) if s == INPUT],
        sinks=[str(n) for n, s in zip(nodes, topo) if s == SINK],
        model_node=str(nodes[topo.index(MODEL)]),
        second_input=str(feed) if feed is not None else None,
        side_nodes=[str(s[0]) for s in side.values()],
    )
    return lines, truth


def write_trace_bundle(plan: SyntheticAppPlan, out_dir) -> GroundTruth:
    """Write trace.jsonl, jumps.json, static_edges.json, roles.json and truth.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines, truth = generate_trace(plan)
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    (out / "jumps.json").write_text(json.dumps([j.to_dict() for j in truth.jump_records], indent=1))
    (out / "static_edges.json").write_text("[]\n")
    (out / "roles.json").write_text(json.dumps(truth.roles, indent=1, sort_keys=True))
    (out / "truth.json").write_text(json.dumps(truth.to_dict(), indent=1))
    return truth


def noise_lines(n: int, seed: int = 0, pool_size: int = 2000):
    """Yield ``n`` well-formed background trace lines quickly.

    A pool of serialized invocations is prepared once; each emitted line
    reuses one with a fresh, increasing timestamp.
    """
    rng = random.Random(seed)
    names = _Names(rng, False, KeywordSet.default())
    funcs = _background_pool(rng, names, 300)
    templates = []
    for _ in range(pool_size):
        d = _background_record(rng.choice(funcs), funcs, rng)
        line = serialize_record(TraceRecord(0, PIPE_PID, 0, **d))
        head = '{"v":1,"ts":0,"pid":%d,"tid":0,' % PIPE_PID
        assert line.startswith(head)
        templates.append(line[len(head):])
    ts = 1_000_000_000
    for i in range(n):
        ts += 1 + (i * 7919) % 997
        yield '{"v":1,"ts":%d,"pid":%d,"tid":%d,%s' % (ts, PIPE_PID, 4101 + i % 4, templates[i % pool_size])


# ---------------------------------------------------------------------------
# score datasets

ETHNICITIES = ("Asian", "Black", "Indian", "White")
SEXES = ("Male", "Female")
AGE_BINS = ("0-2", "3-9", "10-19", "20-29", "30-39", "40-49", "50-59", "60-69", "70-100")


def group_label(ethnicity: str, sex: str) -> str:
    parts = ethnicity.replace("_", " ").split()
    return "".join(p[0].upper() for p in parts) + sex[0].upper()


@dataclass
class DisparityPlan:
    groups: tuple = tuple((e, s) for e in ETHNICITIES for s in SEXES)
    concepts: tuple = ()
    n_per_group: int = 300
    base_mean: float = 0.15
    base_sd: float = 0.1
    shifts: dict = field(default_factory=dict)        # (concept, group label) -> mean shift
    annotations: dict = field(default_factory=dict)   # (concept, group label) -> (n_pos, n_neg)
    positive_shift: float = 0.3
    sex_scores: bool = False
    age_bias: dict = field(default_factory=dict)      # age bin -> predicted-age offset
    face_count_probs: tuple = (0.0, 1.0, 0.0)         # P(0 faces), P(1), P(2+)
    seed: int = 0

    def __post_init__(self):
        self.groups = tuple(tuple(g) for g in self.groups)
        self.concepts = tuple(self.concepts)
        labels = self.group_labels
        for key in list(self.shifts) + list(self.annotations):
            c, g = key
            if c not in self.concepts or g not in labels:
                raise ValueError(f"plan key {key} does not name an existing (concept, group)")
        for (c, g), (npos, nneg) in self.annotations.items():
            if npos + nneg > self.n_per_group:
                raise ValueError(f"annotation counts for {(c, g)} exceed n_per_group")

    @property
    def group_labels(self) -> list[str]:
        return [group_label(e, s) for e, s in self.groups]

    @classmethod
    def from_dict(cls, d: dict) -> "DisparityPlan":
        d = dict(d)
        for key in ("shifts", "annotations"):
            if key in d:
                d[key] = {tuple(k.split("|")) if isinstance(k, str) else tuple(k):
                          (tuple(v) if isinstance(v, list) else v) for k, v in d[key].items()}
        return cls(**d)


@dataclass
class ScoreDraw:
    """In-memory result of a :class:`DisparityPlan`."""
    sample_ids: list[str]
    group_index: np.ndarray          # (n_samples,)
    sex: list[str]
    ethnicity: list[str]
    age_bin: list[str]
    scores: np.ndarray               # (n_concepts, n_samples)
    annotations: dict                # sample_id -> {concept: "pos"|"neg"}
    face_count: np.ndarray | None
    predicted_age: np.ndarray | None
    predicted_sex_score: np.ndarray | None
    counts: dict                     # (concept, group) -> (n_pos, n_neg)

    def table(self, labels: list[str], concepts) -> dict:
        """concept -> group label -> score array."""
        out = {}
        for ci, c in enumerate(concepts):
            out[c] = {g: self.scores[ci, self.group_index == gi] for gi, g in enumerate(labels)}
        return out


def _clip_normal(rng, mean, sd, size):
    return np.clip(rng.normal(mean, sd, size), 0.0, 1.0)


def draw_scores(plan: DisparityPlan) -> ScoreDraw:
    rng = np.random.default_rng(plan.seed)
    labels = plan.group_labels
    n, k = plan.n_per_group, len(plan.groups)
    total = n * k
    sample_ids = [f"s{i:06d}" for i in range(total)]
    gidx = np.repeat(np.arange(k), n)
    sex = [plan.groups[g][1] for g in gidx]
    eth = [plan.groups[g][0] for g in gidx]
    bins = [AGE_BINS[i] for i in rng.integers(0, len(AGE_BINS), total)]

    annotations: dict[str, dict[str, str]] = {}
    pos_mask = np.zeros((len(plan.concepts), total), dtype=bool)
    counts = {}
    cidx = {c: i for i, c in enumerate(plan.concepts)}
    for (c, g), (npos, nneg) in sorted(plan.annotations.items()):
        gi = labels.index(g)
        members = rng.permutation(np.flatnonzero(gidx == gi))[:npos + nneg]
        for j, s in enumerate(members):
            lab = "pos" if j < npos else "neg"
            annotations.setdefault(sample_ids[s], {})[c] = lab
            if lab == "pos":
                pos_mask[cidx[c], s] = True
        counts[(c, g)] = (npos, nneg)

    scores = np.empty((len(plan.concepts), total))
    for ci, c in enumerate(plan.concepts):
        mean = np.full(total, plan.base_mean)
        for gi, g in enumerate(labels):
            mean[gidx == gi] += plan.shifts.get((c, g), 0.0)
        mean[pos_mask[ci]] += plan.positive_shift
        scores[ci] = np.clip(rng.normal(mean, plan.base_sd), 0.0, 1.0)

    face = age = sexs = None
    if plan.sex_scores:
        male = np.array([s == "Male" for s in sex])
        sexs = np.where(male, _clip_normal(rng, 0.75, 0.2, total), _clip_normal(rng, 0.25, 0.2, total))
        mids = np.array([_bin_mid(b) + plan.age_bias.get(b, 0.0) for b in bins])
        age = np.clip(rng.normal(mids, 5.0), 0.0, 100.0)
        face = rng.choice(np.array([0, 1, 2]), size=total, p=np.asarray(plan.face_count_probs))
    return ScoreDraw(sample_ids, gidx, sex, eth, bins, scores, annotations, face, age, sexs, counts)


def _bin_mid(b: str) -> float:
    lo, hi = (int(x) for x in b.split("-"))
    return (lo + hi) / 2.0


def _fmt(x: float) -> str:
    return repr(float(x))


def generate_scores(plan: DisparityPlan, out_dir=None) -> tuple[str, str, dict]:
    """Render a plan as samples.csv / scores.csv text plus its ground truth.

    With ``out_dir`` the three artifacts are also written there.
    """
    d = draw_scores(plan)
    s_lines = ["sample_id,sex,ethnicity,age_bin,variant,annotations"]
    for i, sid in enumerate(d.sample_ids):
        ann = ";".join(f"{c}:{v}" for c, v in sorted(d.annotations.get(sid, {}).items()))
        s_lines.append(f"{sid},{d.sex[i]},{d.ethnicity[i]},{d.age_bin[i]},,{ann}")
    r_lines = ["sample_id,concept,score,face_count,predicted_age,predicted_sex_score"]
    extras = [""] * len(d.sample_ids)
    if plan.sex_scores:
        extras = [f"{int(d.face_count[i])},{_fmt(d.predicted_age[i])},{_fmt(d.predicted_sex_score[i])}"
                  for i in range(len(d.sample_ids))]
    else:
        extras = [",,"] * len(d.sample_ids)
    if plan.concepts:
        for i, sid in enumerate(d.sample_ids):
            for ci, c in enumerate(plan.concepts):
                r_lines.append(f"{sid},{c},{_fmt(d.scores[ci, i])},{extras[i]}")
    elif plan.sex_scores:
        for i, sid in enumerate(d.sample_ids):
            r_lines.append(f"{sid},boy_prob,{_fmt(d.predicted_sex_score[i])},{extras[i]}")
    labels = plan.group_labels
    truth = {
        "groups": labels,
        "n_per_group": plan.n_per_group,
        "shifts": {f"{c}|{g}": v for (c, g), v in sorted(plan.shifts.items())},
        "annotation_counts": {f"{c}|{g}": list(v) for (c, g), v in sorted(d.counts.items())},
        "seed": plan.seed,
    }
    if plan.sex_scores:
        fc = d.face_count
        truth["face_count"] = {"zero": int(np.sum(fc == 0)), "single": int(np.sum(fc == 1)),
                               "multi": int(np.sum(fc >= 2))}
    samples_csv = "\n".join(s_lines) + "\n"
    scores_csv = "\n".join(r_lines) + "\n"
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "samples.csv").write_text(samples_csv)
        (out / "scores.csv").write_text(scores_csv)
        (out / "truth.json").write_text(json.dumps(truth, indent=1))
    return samples_csv, scores_csv, truth
