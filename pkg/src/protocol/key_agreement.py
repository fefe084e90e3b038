"""End-to-end nested-lattice key agreement over a Gaussian Markov tree.

One trial draws N = n * N_out samples per terminal and runs four phases:

  quantize  y = [Q_v(x + d) - d] mod the coarse lattice, per block
  analog    every member of V* broadcasts w = [y] mod its middle lattice and
            each terminal estimates the members' blocks outward through T*
  digital   every member of V* broadcasts the Reed-Solomon syndrome of its
            field-image sequence; the others correct their estimates
  extract   the shared public matrix maps the concatenated images to the key

Trials are independent and each gets its own generator seeded from
(seed, trial), so results do not depend on scheduling.
"""
import logging
import math
import time
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.extractors.key_extractor import ExtractorMatrix, build_extractor, extract
from src.lattices.construction_a import mod_lattice, nearest_point, poltyrev_exponent, sample_dither
from src.lattices.nested_chain import LatticeChain, build_chain, coset_index, sigma2_target
from src.protocol.block_plan import BlockPlan
from src.reconcilers.finite_field import FieldSpec, field_spec
from src.reconcilers.reed_solomon import RSCode, coset_decompose, decode_batch, syndrome_bits
from src.sources.tree_source import CorrelatedTree, RootedSubtree, first_hop_toward, sample_block
from src.utils.errors import BelowThreshold, DimensionMismatch

logger = logging.getLogger(__name__)

DEFAULT_EXTRACTOR_MARGIN = 0.05

# generator streams under one run seed
_CHAIN_STREAM = 0
_TRIAL_STREAM = 1
_EXTRACTOR_STREAM = 2


@dataclass(frozen=True, eq=False)
class TerminalState:
    """Per-block dithers, quantizer outputs and F_p^{k_v} field images of one terminal."""
    dither: np.ndarray
    y: np.ndarray
    digits: np.ndarray


@dataclass(frozen=True, eq=False)
class Transcript:
    analog: Dict[int, np.ndarray]
    syndromes: Dict[int, np.ndarray]
    extractor_seed: int
    bits: Dict[int, float]


@dataclass(frozen=True, eq=False)
class ProtocolOutcome:
    trial: int
    agreement: bool
    oracle_match: bool
    keys: Dict[int, Optional[np.ndarray]]
    reference_key: Optional[np.ndarray]
    oracle_key: np.ndarray
    transcript: Transcript
    analog_block_errors: int
    identity_violations: int
    propagated_errors: int
    symbol_errors: int
    rs_failures: int
    counters: Dict[str, int] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)
    root_symbols: Optional[np.ndarray] = None
    root_dither: Optional[np.ndarray] = None
    transcript_feature: float = float('nan')
    eavesdropper_key: Optional[np.ndarray] = None
    transcript_key_match: bool = False

    @property
    def failed_terminals(self) -> Tuple[int, ...]:
        return tuple(v for v, key in self.keys.items() if key is None)


@dataclass(frozen=True, eq=False)
class ProtocolSetup:
    """Everything fixed before the first trial: plan, chains, codes and the public extractor."""
    plan: BlockPlan
    chains: Dict[int, LatticeChain]
    codes: Dict[int, RSCode]
    key_field: FieldSpec
    extractor: ExtractorMatrix
    entropy_bound: float
    public_rate: float
    extractor_rate: float
    extractor_margin: float
    seed: int

    @property
    def tree(self) -> CorrelatedTree:
        return self.plan.tree

    @property
    def subtree(self) -> RootedSubtree:
        return self.plan.subtree

    @property
    def key_bits(self) -> float:
        return self.extractor.key_bits

    @property
    def exposed_members(self) -> Tuple[int, ...]:
        """Members with k_a = 0: the middle lattice is the coarse one, so w = y is public."""
        return tuple(v for v in self.plan.members if self.chains[v].k_a == 0)

    @property
    def transcript_determines_key(self) -> bool:
        return len(self.exposed_members) == len(self.plan.members) or self.public_rate >= self.entropy_bound


def _check_block(chain: LatticeChain, a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0 or a.shape[-1] != chain.n:
        raise DimensionMismatch(f"Expected blocks of length {chain.n}, got shape {a.shape}")
    return a


def quantize_block(chain: LatticeChain, x_block, dither) -> np.ndarray:
    x_block = _check_block(chain, x_block)
    dither = _check_block(chain, dither)
    if dither.shape != x_block.shape:
        raise DimensionMismatch(f"Dither shape {dither.shape} does not match block shape {x_block.shape}")
    return mod_lattice(chain.coarse, nearest_point(chain.fine, x_block + dither) - dither)


def analog_broadcast(chain: LatticeChain, y) -> np.ndarray:
    return mod_lattice(chain.middle, y)


def analog_estimate(chain_v: LatticeChain, rho_uv: float, y_u, w_v) -> np.ndarray:
    w_v = np.asarray(w_v, dtype=float)
    return w_v + nearest_point(chain_v.middle, rho_uv * np.asarray(y_u, dtype=float) - w_v)


def field_digits(chain: LatticeChain, y, dither) -> np.ndarray:
    """Coset digits of the lattice point [y + d] mod the coarse lattice."""
    return coset_index(chain, mod_lattice(chain.coarse, np.asarray(y) + dither))


def propagation_order(tree: CorrelatedTree, subtree: RootedSubtree, terminal_u: int) -> List[Tuple[int, int]]:
    """Estimation hops (source, target) taken by terminal u, breadth-first through T*."""
    members = set(subtree.members)
    hops: List[Tuple[int, int]] = []
    start = terminal_u
    if terminal_u not in members:
        start = first_hop_toward(tree, subtree, terminal_u)
        hops.append((terminal_u, start))
    seen = {start}
    queue = deque([start])
    while queue:
        source = queue.popleft()
        for target in tree.neighbors(source):
            if target in members and target not in seen:
                seen.add(target)
                hops.append((source, target))
                queue.append(target)
    return hops


def propagate_estimates(tree: CorrelatedTree, subtree: RootedSubtree, chains: Dict[int, LatticeChain],
                        terminal_u: int, own_y: np.ndarray, transcript: Transcript) -> Dict[int, np.ndarray]:
    values = {terminal_u: own_y}
    for source, target in propagation_order(tree, subtree, terminal_u):
        values[target] = analog_estimate(chains[target], tree.correlation(source, target), values[source],
                                         transcript.analog[target])
    return {v: values[v] for v in subtree.members}


def error_bound_from_ratios(ratios: Sequence[float], n: int) -> float:
    total = 0.0
    for mu in ratios:
        try:
            total += math.exp(-n * poltyrev_exponent(mu))
        except BelowThreshold:
            total += 1.0
    return total


def analog_error_bound(chain_v: LatticeChain, chain_u: LatticeChain, rho_uv: float,
                       delta: Optional[float] = None) -> float:
    """Poltyrev-term bound on Pr[y_v_hat != y_v] for one hop u -> v.

    Pure exponent terms without the finite-n corrections, so it is a heuristic
    at desk-scale n. Terms below the threshold count as 1. The design margin is
    the one chain_v was built with; a delta passed here must match it.
    """
    if delta is not None and not math.isclose(delta, chain_v.delta, rel_tol=1e-12, abs_tol=1e-15):
        raise ValueError(f"delta={delta} does not match the chain's design margin {chain_v.delta}")
    n = chain_v.n
    ratios = (
        chain_u.coarse.volume ** (2 / n) / (1 + chain_u.sigma2),
        chain_v.coarse.volume ** (2 / n) / (1 + chain_v.sigma2),
        chain_v.middle.volume ** (2 / n) / (1 - rho_uv ** 2 + chain_v.sigma2 + rho_uv ** 2 * chain_u.sigma2),
    )
    bound = error_bound_from_ratios(ratios, n)
    if bound >= 1.0:
        logger.warning(f"Analog error bound {bound:.3f} is vacuous at n={n}")
    return bound


def quantized_entropy_bound(plan: BlockPlan, sigma2: Dict[int, float]) -> float:
    """Lower bound on the joint quantized entropy in bits per sample, from measured second moments.

    Each term is clipped at its terminal's quantization rate.
    """
    tree, subtree = plan.tree, plan.subtree
    root = subtree.root
    total = min(plan.constraints[root], 0.5 * math.log2(1 + 1 / sigma2[root]))
    for u in subtree.members:
        if u == root:
            continue
        rho = tree.correlation(u, subtree.parent[u])
        total += min(plan.constraints[u], 0.5 * math.log2(1 + (1 - rho * rho) / sigma2[u]))
    return total


def _neighbor_sigma2(plan: BlockPlan, chains: Dict[int, LatticeChain], v: int) -> List[Tuple[float, float]]:
    out = []
    for u in plan.tree.neighbors(v):
        s2 = chains[u].sigma2 if u in chains else sigma2_target(plan.constraints[u], plan.delta)
        out.append((plan.tree.correlation(u, v), s2))
    return out


def build_chains(plan: BlockPlan, seed: int, k_a: Optional[int] = None, coarse_dim: int = 0,
                 sigma2_samples: int = 100_000, max_retries: int = 8) -> Dict[int, LatticeChain]:
    """Silent terminals first, then V* deepest first, so neighbors are measured where possible."""
    tree, members = plan.tree, plan.members
    chains: Dict[int, LatticeChain] = {}
    order = [v for v in tree.vertices if v not in members] + list(reversed(members))
    for v in order:
        rng = np.random.default_rng([seed, _CHAIN_STREAM, v])
        if v in members:
            neighbors = _neighbor_sigma2(plan, chains, v)
            chains[v] = build_chain(plan.n, plan.p, plan.k_v[v], k_a, [r for r, _ in neighbors], plan.delta, rng,
                                    sigma2_neighbors=[s for _, s in neighbors], rq_target=plan.constraints[v],
                                    coarse_dim=coarse_dim, sigma2_samples=sigma2_samples, max_retries=max_retries)
        else:
            chains[v] = build_chain(plan.n, plan.p, plan.k_v[v], 0, [], plan.delta, rng,
                                    rq_target=plan.constraints[v], coarse_dim=coarse_dim,
                                    sigma2_samples=sigma2_samples, max_retries=max_retries)
        logger.info(f"Chain for {tree.name(v)!r}: k_a={chains[v].k_a}, gamma={chains[v].scale:.4f}, "
                    f"sigma2={chains[v].sigma2:.4g}")

    for v in members:
        chains[v] = chains[v].with_neighbors(_neighbor_sigma2(plan, chains, v))
        if chains[v].middle_margin < 1.0:
            logger.warning(f"Chain for {tree.name(v)!r}: middle margin {chains[v].middle_margin:.4f} < 1 "
                           f"with measured neighbor second moments")
    return chains


def public_rate(plan: BlockPlan, chains: Dict[int, LatticeChain]) -> float:
    """Public bits per sample of all of V*, analog plus digital."""
    digital = (plan.n_out - plan.k_out) * math.log2(plan.p) / (plan.n * plan.n_out)
    return sum(chains[v].analog_bits / plan.n + plan.k_v[v] * digital for v in plan.members)


def prepare_protocol(plan: BlockPlan, seed: int, k_a: Optional[int] = None, coarse_dim: int = 0,
                     sigma2_samples: int = 100_000, max_retries: int = 8,
                     extractor_margin: float = DEFAULT_EXTRACTOR_MARGIN) -> ProtocolSetup:
    chains = build_chains(plan, seed, k_a=k_a, coarse_dim=coarse_dim, sigma2_samples=sigma2_samples,
                          max_retries=max_retries)
    codes = {v: RSCode(field=field_spec(plan.p, plan.k_v[v]), length=plan.n_out, dimension=plan.k_out)
             for v in plan.members}
    key_field = field_spec(plan.p, plan.k)

    bound = quantized_entropy_bound(plan, {v: c.sigma2 for v, c in chains.items()})
    public = public_rate(plan, chains)
    floor_rate = math.log2(key_field.order) / (plan.n_out * plan.n)
    rate = bound - public - extractor_margin
    if rate < floor_rate:
        logger.warning(f"Entropy bound {bound:.4f} minus public rate {public:.4f} and margin {extractor_margin} "
                       f"leaves {rate:.4f} bits/sample; extracting one GF({key_field.order}) symbol")
        rate = floor_rate

    extractor_seed = int(np.random.default_rng([seed, _EXTRACTOR_STREAM]).integers(0, 2 ** 63 - 1))
    extractor = build_extractor(extractor_seed, rate * plan.n, plan.n_out, key_field)
    logger.info(f"Extractor: {extractor.rows} GF({key_field.order}) symbols from {plan.n_out} blocks "
                f"(bound {bound:.4f}, public {public:.4f} bits/sample)")
    setup = ProtocolSetup(plan=plan, chains=chains, codes=codes, key_field=key_field, extractor=extractor,
                          entropy_bound=bound, public_rate=public, extractor_rate=rate,
                          extractor_margin=extractor_margin, seed=seed)
    if setup.transcript_determines_key:
        exposed = [plan.tree.name(v) for v in setup.exposed_members]
        logger.warning(f"Public transcript determines the key (k_a=0 at {exposed}, public {public:.4f} "
                       f"vs bound {bound:.4f} bits/sample)")
    return setup


def _rows_equal(a: np.ndarray, b: np.ndarray, tol: float) -> np.ndarray:
    return np.all(np.abs(a - b) <= tol, axis=-1)


def _pack_key(setup: ProtocolSetup, digits: Dict[int, np.ndarray]) -> np.ndarray:
    stacked = np.hstack([digits[v] for v in setup.subtree.members])
    return extract(setup.extractor, setup.key_field.pack(stacked)).view(np.ndarray).astype(np.int64)


def transcript_key(setup: ProtocolSetup, transcript: Transcript, dithers: Dict[int, np.ndarray]) -> np.ndarray:
    """Key guess from public data alone: field images of the analog messages under the public dithers.

    Exact for every member with k_a = 0, since then w = y.
    """
    members = setup.subtree.members
    return _pack_key(setup, {v: field_digits(setup.chains[v], transcript.analog[v], dithers[v]) for v in members})


def terminal_bits(setup: ProtocolSetup) -> Dict[int, float]:
    """Public bits per terminal for one run; silent terminals send nothing."""
    plan = setup.plan
    bits = {v: 0.0 for v in plan.tree.vertices}
    for v in plan.members:
        bits[v] = setup.chains[v].analog_bits * plan.n_out + syndrome_bits(setup.codes[v])
    return bits


def run_trial(setup: ProtocolSetup, trial: int) -> ProtocolOutcome:
    plan, chains, tree, subtree = setup.plan, setup.chains, setup.tree, setup.subtree
    members = subtree.members
    rng = np.random.default_rng([setup.seed, _TRIAL_STREAM, trial])
    ops: Counter = Counter()
    timing: Dict[str, float] = {}

    started = time.perf_counter()
    x = sample_block(tree, plan.total_samples, rng, index=trial).samples.reshape(len(tree.names), plan.n_out, plan.n)
    states: Dict[int, TerminalState] = {}
    for v in tree.vertices:
        chain = chains[v]
        dither = sample_dither(chain.fine, rng, size=plan.n_out)
        y = quantize_block(chain, x[v], dither)
        states[v] = TerminalState(dither=dither, y=y, digits=field_digits(chain, y, dither))
        ops['nearest_point_queries'] += 3 * plan.n_out
        ops['coset_evaluations'] += plan.n_out * (len(chain.fine.codewords) + 2 * len(chain.coarse.codewords))
    timing['quantize'] = time.perf_counter() - started

    started = time.perf_counter()
    analog = {v: analog_broadcast(chains[v], states[v].y) for v in members}
    ops['nearest_point_queries'] += len(members) * plan.n_out
    true_seq = {v: setup.codes[v].field.pack(states[v].digits) for v in members}
    syndromes = {v: coset_decompose(setup.codes[v], true_seq[v]) for v in members}
    ops['field_ops'] += sum(plan.n_out * setup.codes[v].redundancy for v in members)
    transcript = Transcript(
        analog=analog,
        syndromes={v: s.view(np.ndarray).astype(np.int64) for v, s in syndromes.items()},
        extractor_seed=setup.extractor.seed,
        bits=terminal_bits(setup),
    )

    analog_errors = violations = propagated = symbol_errors = rs_failures = 0
    estimates: Dict[int, Dict[int, np.ndarray]] = {}
    for u in tree.vertices:
        est = propagate_estimates(tree, subtree, chains, u, states[u].y, transcript)
        estimates[u] = est
        for source, target in propagation_order(tree, subtree, u):
            chain_t = chains[target]
            tol = 1e-9 * chain_t.scale
            source_value = states[u].y if source == u else est[source]
            source_ok = _rows_equal(source_value, states[source].y, tol)
            target_ok = _rows_equal(est[target], states[target].y, tol)
            q = nearest_point(chain_t.middle, tree.correlation(source, target) * states[source].y - states[target].y)
            violated = ~_rows_equal(q, 0.0, tol)
            analog_errors += int(np.sum(source_ok & ~target_ok))
            violations += int(np.sum(source_ok & violated))
            propagated += int(np.sum(~source_ok & ~target_ok))
            ops['nearest_point_queries'] += plan.n_out
            ops['coset_evaluations'] += plan.n_out * len(chain_t.middle.codewords)
    timing['analog'] = time.perf_counter() - started

    # all receivers of member v decode against its one syndrome
    started = time.perf_counter()
    reconciled: Dict[int, Optional[Dict[int, np.ndarray]]] = {
        u: {u: states[u].digits} if u in members else {} for u in tree.vertices
    }
    for v in members:
        code = setup.codes[v]
        receivers = [u for u in tree.vertices if u != v]
        est_seq = code.field.pack(np.stack([field_digits(chains[v], estimates[u][v], states[v].dither)
                                            for u in receivers]))
        ops['nearest_point_queries'] += 2 * plan.n_out * len(receivers)
        symbol_errors += int(np.count_nonzero(est_seq != true_seq[v]))
        corrected, ok = decode_batch(code, est_seq, [syndromes[v]] * len(receivers))
        ops['field_ops'] += 2 * plan.n_out * code.redundancy * len(receivers)
        for i, u in enumerate(receivers):
            if not ok[i]:
                logger.debug(f"Trial {trial}: terminal {tree.name(u)!r} failed on {tree.name(v)!r}")
                rs_failures += 1
                reconciled[u] = None
            elif reconciled[u] is not None:
                reconciled[u][v] = code.field.unpack(corrected[i])
    timing['digital'] = time.perf_counter() - started

    started = time.perf_counter()
    keys = {u: None if digits is None else _pack_key(setup, digits) for u, digits in reconciled.items()}
    oracle_key = _pack_key(setup, {v: states[v].digits for v in members})
    eavesdropper_key = transcript_key(setup, transcript, {v: states[v].dither for v in members})
    ops['field_ops'] += (len(tree.names) + 1) * setup.extractor.rows * plan.n_out
    timing['extract'] = time.perf_counter() - started

    reference = keys[subtree.root]
    succeeded = [k for k in keys.values() if k is not None]
    agreement = len(succeeded) == len(keys) and all(np.array_equal(k, reference) for k in succeeded)
    oracle_match = all(np.array_equal(k, oracle_key) for k in succeeded)

    root = subtree.root
    return ProtocolOutcome(
        trial=trial,
        agreement=agreement,
        oracle_match=oracle_match,
        keys=keys,
        reference_key=reference,
        oracle_key=oracle_key,
        transcript=transcript,
        analog_block_errors=analog_errors,
        identity_violations=violations,
        propagated_errors=propagated,
        symbol_errors=symbol_errors,
        rs_failures=rs_failures,
        counters=dict(ops),
        timing=timing,
        root_symbols=true_seq[root].view(np.ndarray).astype(np.int64),
        root_dither=states[root].dither[:, 0].copy(),
        transcript_feature=float(analog[root][0, 0]),
        eavesdropper_key=eavesdropper_key,
        transcript_key_match=bool(np.array_equal(eavesdropper_key, oracle_key)),
    )


def run_protocol(setup: ProtocolSetup, trials: int, threads: int = 1) -> List[ProtocolOutcome]:
    if trials < 0:
        raise ValueError(f"Trial count must be non-negative, got {trials}")
    if trials == 0:
        return []
    logger.info(f"Running {trials} trials on {threads} thread(s)")
    if threads <= 1:
        outcomes = [run_trial(setup, t) for t in range(trials)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(lambda t: run_trial(setup, t), range(trials)))
    agreed = sum(o.agreement for o in outcomes)
    logger.info(f"Agreement in {agreed}/{trials} trials")
    return outcomes


def communication_accounting(setup: ProtocolSetup) -> pd.DataFrame:
    """Measured public bits/sample per member of V*, against the asymptotic core.

    measured = core + slack is an identity: k_out_flooring and delta_term are
    residuals. The comparison with the core is within_core_bound, which is
    expected to be False at desk-scale n.
    """
    plan, tree = setup.plan, setup.tree
    rows = []
    for v in plan.members:
        chain = setup.chains[v]
        rq = plan.constraints[v]
        neighbors = _neighbor_sigma2(plan, setup.chains, v)
        worst = max(1 - r * r + chain.sigma2 + r * r * s2 for r, s2 in neighbors)
        analog = chain.analog_bits / plan.n
        digital = rq * (plan.n_out - plan.k_out) / plan.n_out
        core = 0.5 * math.log2(worst / chain.sigma2) + plan.delta * (1 + 2 * rq)
        rows.append({
            'terminal': tree.name(v),
            'analog_bits': analog,
            'digital_bits': digital,
            'measured': analog + digital,
            'core_bound': core,
            'within_core_bound': bool(analog + digital <= core),
            'quantization_gap': 0.5 * math.log2(chain.normalized_moment),
            'volume_discretization': 0.5 * math.log2(chain.middle_margin),
            'k_out_flooring': digital - 2 * plan.delta * rq,
            'delta_term': 0.5 * math.log2(1 + plan.delta) - plan.delta,
            'analog_error_bound': max(analog_error_bound(chain, setup.chains[u], tree.correlation(u, v), plan.delta)
                                      for u in tree.neighbors(v)),
        })
    frame = pd.DataFrame(rows)
    slack_cols = ['quantization_gap', 'volume_discretization', 'k_out_flooring', 'delta_term']
    frame['slack'] = frame[slack_cols].sum(axis=1)
    return frame
