import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from src.protocol.key_agreement import ProtocolOutcome, ProtocolSetup, communication_accounting, propagation_order
from src.utils.errors import TooFewTrials

logger = logging.getLogger(__name__)

MIN_SECRECY_TRIALS = 100
DEFAULT_BINS = 16
DEFAULT_PERMUTATIONS = 200

TRIAL_COLUMNS = [
    'trial', 'agreement', 'oracle_match', 'transcript_key_match', 'analog_block_errors', 'identity_violations',
    'propagated_errors', 'symbol_errors', 'rs_failures', 'failed_terminals', 'key_symbols', 'key_bits', 'key',
    'nearest_point_queries', 'coset_evaluations', 'field_ops',
]
TRIAL_DTYPES = {
    'trial': 'int64', 'agreement': bool, 'oracle_match': bool, 'transcript_key_match': bool,
    'analog_block_errors': 'int64', 'identity_violations': 'int64', 'propagated_errors': 'int64',
    'symbol_errors': 'int64', 'rs_failures': 'int64', 'failed_terminals': 'int64', 'key_symbols': 'int64',
    'key_bits': float, 'key': object, 'nearest_point_queries': 'int64', 'coset_evaluations': 'int64',
    'field_ops': 'int64',
}


@dataclass(frozen=True)
class SecrecyDiagnostics:
    """Empirical surrogates for key uniformity and transcript independence. DIAGNOSTIC only."""
    samples: int
    chi2: float
    chi2_pvalue: float
    key_entropy: float
    key_entropy_max: float
    mutual_information: float
    mi_pvalue: float
    transcript_key_mi: float = float('nan')
    transcript_key_mi_pvalue: float = float('nan')


@dataclass(frozen=True, eq=False)
class EvaluationReport:
    trials: int
    agreement_rate: float
    agreement_ci: Tuple[float, float]
    oracle_match_rate: float
    analog_error_rate: float
    analog_error_ci: Tuple[float, float]
    symbol_error_rate: float
    rs_failure_rate: float
    key_symbols: int
    key_bits_per_sample: float
    r_key: float
    extractor_rate: float
    entropy_bound: float
    public_rate: float
    transcript_determines_key: bool
    transcript_key_match_rate: float
    quantizer_entropy: Optional[float]
    quantizer_entropy_given_dither: Optional[float]
    accounting: pd.DataFrame
    secrecy: Optional[SecrecyDiagnostics] = None

    def to_frame(self) -> pd.DataFrame:
        rows = [
            ('trials', self.trials),
            ('agreement_rate', self.agreement_rate),
            ('agreement_ci_low', self.agreement_ci[0]),
            ('agreement_ci_high', self.agreement_ci[1]),
            ('oracle_match_rate', self.oracle_match_rate),
            ('analog_error_rate', self.analog_error_rate),
            ('analog_error_ci_low', self.analog_error_ci[0]),
            ('analog_error_ci_high', self.analog_error_ci[1]),
            ('symbol_error_rate', self.symbol_error_rate),
            ('rs_failure_rate', self.rs_failure_rate),
            ('key_symbols', self.key_symbols),
            ('key_bits_per_sample', self.key_bits_per_sample),
            ('r_key', self.r_key),
            ('extractor_rate', self.extractor_rate),
            ('entropy_bound', self.entropy_bound),
            ('public_rate', self.public_rate),
            ('transcript_determines_key', float(self.transcript_determines_key)),
            ('transcript_key_match_rate', self.transcript_key_match_rate),
            ('quantizer_entropy', self.quantizer_entropy),
            ('quantizer_entropy_given_dither', self.quantizer_entropy_given_dither),
        ]
        if self.secrecy is not None:
            rows += [
                ('diagnostic_key_chi2', self.secrecy.chi2),
                ('diagnostic_key_chi2_pvalue', self.secrecy.chi2_pvalue),
                ('diagnostic_key_entropy', self.secrecy.key_entropy),
                ('diagnostic_key_entropy_max', self.secrecy.key_entropy_max),
                ('diagnostic_transcript_mi', self.secrecy.mutual_information),
                ('diagnostic_transcript_mi_pvalue', self.secrecy.mi_pvalue),
                ('diagnostic_transcript_key_mi', self.secrecy.transcript_key_mi),
                ('diagnostic_transcript_key_mi_pvalue', self.secrecy.transcript_key_mi_pvalue),
            ]
        return pd.DataFrame(rows, columns=['metric', 'value'])


def wilson_interval(successes: int, total: int, confidence: float = 0.95) -> Tuple[float, float]:
    if total == 0:
        return (0.0, 1.0)
    z = stats.norm.ppf(0.5 + confidence / 2)
    phat = successes / total
    denom = 1 + z * z / total
    center = (phat + z * z / (2 * total)) / denom
    half = z * math.sqrt(phat * (1 - phat) / total + z * z / (4 * total * total)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def _counts(values) -> np.ndarray:
    _, counts = np.unique(np.asarray(values), axis=0, return_counts=True)
    return counts


def plugin_entropy(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=float)
    counts = counts[counts > 0]
    if counts.size == 0:
        return 0.0
    probs = counts / counts.sum()
    return float(-(probs * np.log2(probs)).sum())


def miller_madow_entropy(counts: np.ndarray, alphabet: Optional[int] = None) -> float:
    """Plug-in entropy in bits plus the (m - 1) / 2N bias term, capped at log2(alphabet)."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total == 0:
        return 0.0
    occupied = int(np.count_nonzero(counts))
    value = plugin_entropy(counts) + (occupied - 1) / (2 * total * math.log(2))
    if alphabet is not None:
        value = min(value, math.log2(alphabet))
    return value


def bin_edges(values: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, bins + 1)[1:-1]


def _row_labels(rows) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim == 1:
        rows = rows[:, None]
    return np.unique(rows, axis=0, return_inverse=True)[1].ravel()


def plugin_mutual_information(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x)
    y = np.asarray(y)
    joint = np.stack([x, y], axis=1)
    return plugin_entropy(_counts(x)) + plugin_entropy(_counts(y)) - plugin_entropy(_counts(joint))


def mi_permutation_test(x: np.ndarray, y: np.ndarray, permutations: int = DEFAULT_PERMUTATIONS,
                        seed: int = 0) -> Tuple[float, float]:
    observed = plugin_mutual_information(x, y)
    rng = np.random.default_rng(seed)
    exceed = sum(plugin_mutual_information(x, rng.permutation(y)) >= observed - 1e-12
                 for _ in range(permutations))
    return observed, (1 + exceed) / (1 + permutations)


def secrecy_diagnostics(keys: np.ndarray, features: np.ndarray, key_order: int, bins: int = DEFAULT_BINS,
                        permutations: int = DEFAULT_PERMUTATIONS, seed: int = 0,
                        transcript_keys: Optional[np.ndarray] = None) -> SecrecyDiagnostics:
    """keys: one row of GF(key_order) symbols per trial; features: one public value per trial.

    transcript_keys, when given, holds the key recomputed from each trial's full
    public view; its dependence on the key is tested on whole rows.
    """
    keys = np.asarray(keys, dtype=np.int64)
    if keys.ndim == 1:
        keys = keys[:, None]
    if len(keys) < MIN_SECRECY_TRIALS:
        raise TooFewTrials(f"Secrecy diagnostics need at least {MIN_SECRECY_TRIALS} trials, got {len(keys)}")
    symbol_counts = np.bincount(keys.ravel(), minlength=key_order)
    chi = stats.chisquare(symbol_counts)
    key_space = key_order ** keys.shape[1]
    if key_space > len(keys):
        logger.warning(f"Key space {key_space} exceeds {len(keys)} samples; key entropy is undersampled")
    entropy = miller_madow_entropy(_counts(keys), alphabet=key_space)
    binned = np.digitize(np.asarray(features, dtype=float), bin_edges(np.asarray(features, dtype=float), bins))
    mi, p_value = mi_permutation_test(binned, keys[:, 0], permutations=permutations, seed=seed)
    view_mi = view_p = float('nan')
    if transcript_keys is not None:
        view_mi, view_p = mi_permutation_test(_row_labels(transcript_keys), _row_labels(keys),
                                              permutations=permutations, seed=seed)
    return SecrecyDiagnostics(
        samples=len(keys),
        chi2=float(chi.statistic),
        chi2_pvalue=float(chi.pvalue),
        key_entropy=entropy,
        key_entropy_max=math.log2(key_space),
        mutual_information=mi,
        mi_pvalue=p_value,
        transcript_key_mi=view_mi,
        transcript_key_mi_pvalue=view_p,
    )


def evaluate_secrecy(outcomes: Sequence[ProtocolOutcome], key_order: int, bins: int = DEFAULT_BINS,
                     permutations: int = DEFAULT_PERMUTATIONS, seed: int = 0) -> SecrecyDiagnostics:
    keys = np.array([o.oracle_key for o in outcomes])
    features = np.array([o.transcript_feature for o in outcomes])
    view = np.array([o.eavesdropper_key for o in outcomes])
    return secrecy_diagnostics(keys, features, key_order, bins=bins, permutations=permutations, seed=seed,
                               transcript_keys=view)


def quantizer_entropy(outcomes: Sequence[ProtocolOutcome], alphabet: int,
                      bins: int = DEFAULT_BINS) -> Tuple[float, float]:
    """Entropy of the root's field image per block, marginal and given the binned first dither coordinate."""
    symbols = np.concatenate([o.root_symbols for o in outcomes])
    dither = np.concatenate([o.root_dither for o in outcomes])
    marginal = miller_madow_entropy(_counts(symbols), alphabet=alphabet)
    cells = np.digitize(dither, bin_edges(dither, bins))
    conditional = 0.0
    for cell in np.unique(cells):
        mask = cells == cell
        conditional += mask.mean() * miller_madow_entropy(_counts(symbols[mask]), alphabet=alphabet)
    return marginal, conditional


def hop_blocks(setup: ProtocolSetup) -> int:
    """Estimation hops per trial times blocks per hop."""
    hops = sum(len(propagation_order(setup.tree, setup.subtree, u)) for u in setup.tree.vertices)
    return hops * setup.plan.n_out


def decoded_blocks(setup: ProtocolSetup) -> int:
    members = set(setup.subtree.members)
    per_trial = sum(len(members) - (u in members) for u in setup.tree.vertices)
    return per_trial * setup.plan.n_out


def trial_frame(outcomes: Sequence[ProtocolOutcome], setup: ProtocolSetup) -> pd.DataFrame:
    tree = setup.tree
    rows: List[Dict[str, object]] = []
    for o in outcomes:
        key = None if o.reference_key is None else '-'.join(str(int(s)) for s in o.reference_key)
        row = {
            'trial': o.trial,
            'agreement': bool(o.agreement),
            'oracle_match': bool(o.oracle_match),
            'transcript_key_match': bool(o.transcript_key_match),
            'analog_block_errors': o.analog_block_errors,
            'identity_violations': o.identity_violations,
            'propagated_errors': o.propagated_errors,
            'symbol_errors': o.symbol_errors,
            'rs_failures': o.rs_failures,
            'failed_terminals': len(o.failed_terminals),
            'key_symbols': setup.extractor.rows,
            'key_bits': setup.key_bits,
            'key': key,
            'nearest_point_queries': o.counters.get('nearest_point_queries', 0),
            'coset_evaluations': o.counters.get('coset_evaluations', 0),
            'field_ops': o.counters.get('field_ops', 0),
        }
        for v in tree.vertices:
            row[f'bits_{tree.name(v)}'] = float(o.transcript.bits[v])
        rows.append(row)
    bit_columns = [f'bits_{tree.name(v)}' for v in tree.vertices]
    dtypes = {**TRIAL_DTYPES, **{c: float for c in bit_columns}}
    return pd.DataFrame(rows, columns=TRIAL_COLUMNS + bit_columns).astype(dtypes)


def evaluate(outcomes: Sequence[ProtocolOutcome], setup: ProtocolSetup, bins: int = DEFAULT_BINS,
             permutations: int = DEFAULT_PERMUTATIONS) -> EvaluationReport:
    plan = setup.plan
    trials = len(outcomes)
    agreed = sum(o.agreement for o in outcomes)
    analog_total = hop_blocks(setup) * trials
    analog_errors = sum(o.analog_block_errors + o.propagated_errors for o in outcomes)
    decoded = decoded_blocks(setup) * trials

    secrecy = None
    marginal = conditional = None
    if trials >= MIN_SECRECY_TRIALS:
        secrecy = evaluate_secrecy(outcomes, setup.key_field.order, bins=bins, permutations=permutations,
                                   seed=setup.seed)
        root_alphabet = plan.p ** plan.k_v[plan.subtree.root]
        marginal, conditional = quantizer_entropy(outcomes, root_alphabet, bins=bins)
    elif trials > 0:
        logger.warning(f"Only {trials} trials; skipping secrecy diagnostics (need {MIN_SECRECY_TRIALS})")

    return EvaluationReport(
        trials=trials,
        agreement_rate=agreed / trials if trials else 0.0,
        agreement_ci=wilson_interval(agreed, trials),
        oracle_match_rate=sum(o.oracle_match for o in outcomes) / trials if trials else 0.0,
        analog_error_rate=analog_errors / analog_total if analog_total else 0.0,
        analog_error_ci=wilson_interval(analog_errors, analog_total),
        symbol_error_rate=sum(o.symbol_errors for o in outcomes) / decoded if decoded else 0.0,
        rs_failure_rate=sum(o.rs_failures > 0 for o in outcomes) / trials if trials else 0.0,
        key_symbols=setup.extractor.rows,
        key_bits_per_sample=setup.key_bits / plan.total_samples,
        r_key=plan.report.r_key,
        extractor_rate=setup.extractor_rate,
        entropy_bound=setup.entropy_bound,
        public_rate=setup.public_rate,
        transcript_determines_key=setup.transcript_determines_key,
        transcript_key_match_rate=sum(o.transcript_key_match for o in outcomes) / trials if trials else 0.0,
        quantizer_entropy=marginal,
        quantizer_entropy_given_dither=conditional,
        accounting=communication_accounting(setup),
        secrecy=secrecy,
    )
