import json
import logging
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from conformal_planner.core import LABELS, OPTION_E_TEXT
from conformal_planner.scenario import Scenario, StepNode, sample_batch, sample_scenarios
from conformal_planner.scorer import (
    DegenerateResponseError,
    LlmScorer,
    ProtocolError,
    ScorerSpec,
    ScorerUsageError,
    SyntheticScorer,
    TransportError,
    apply_temperature,
    build_mcqa_prompt,
    effective_kappa,
    keyed_uniforms,
    llm_complete,
    llm_score,
    make_scorer,
    parse_label_logprobs,
    score_arrays,
    synthetic_score,
)

DATA = Path(__file__).parent / "data"
KITCHEN_OPTIONS = (
    "pick up the sparkling water",
    "pick up the orange soda",
    "pick up the energy drink",
    "pick up the lemonade",
)


def kitchen_scenario(ambiguity=0.5, prior=(0.4, 0.1, 0.3, 0.1, 0.1)):
    node = StepNode(KITCHEN_OPTIONS + (OPTION_E_TEXT,), frozenset("A"), prior, "A")
    return Scenario(
        "kitchen-0", "kitchen",
        "There is a sparkling water, an orange soda, an energy drink and a lemonade on the counter. "
        "Bring me something to drink that is not too sweet.",
        1, ambiguity, {(): node}, 123,
    )


# -- synthetic scorer ---------------------------------------------------------

def test_one_hot_limit():
    spec = ScorerSpec(kappa=math.inf, rho=0.0, tau=1.0)
    for s in sample_scenarios("spatial", 50, 4):
        conf = synthetic_score(spec, s, 0, 9)
        assert conf[s.node().anchor] == 1.0
        assert sum(conf.scores) == 1.0


def test_mode_probability_matches_gamma_integral():
    # uniform prior, no ambiguity: the anchor is the argmax iff its Gamma(1 + k)
    # evidence beats four independent Exp(1) draws
    kappa, n = 3.0, 10_000
    spec = ScorerSpec(kappa=kappa, rho=0.0, tau=1.0)
    prior = np.full((n, 5), 0.2)
    acceptable = np.zeros((n, 5), dtype=bool)
    acceptable[:, 2] = True
    q = score_arrays(spec, prior, acceptable, np.full(n, 2), np.zeros(n), np.arange(n), 11)
    accuracy = np.mean(q.argmax(axis=1) == 2)
    analytic, _ = integrate.quad(lambda g: stats.gamma.pdf(g, 1 + kappa) * (1 - math.exp(-g)) ** 4, 0, np.inf)
    assert accuracy == pytest.approx(analytic, abs=0.01)


def test_mode_probability_through_scenario_api():
    kappa = 2.0
    s = kitchen_scenario(ambiguity=0.0, prior=(0.2,) * 5)
    spec = ScorerSpec(kappa=kappa, rho=0.0)
    hits = [synthetic_score(spec, s, 0, seed).argmax() == "A" for seed in range(3000)]
    analytic, _ = integrate.quad(lambda g: stats.gamma.pdf(g, 1 + kappa) * (1 - math.exp(-g)) ** 4, 0, np.inf)
    # 3000 draws: 4 standard errors is about 0.036
    assert np.mean(hits) == pytest.approx(analytic, abs=0.036)


def test_temperature_hand_example():
    p = np.array([0.64, 0.16, 0.08, 0.08, 0.04])
    root = p ** (1 / 3)
    np.testing.assert_allclose(apply_temperature(p, 3.0), root / root.sum(), rtol=1e-13)
    assert apply_temperature(p, 3.0)[0] == pytest.approx(0.8617738760127535 / 2.6084264646798276, rel=1e-12)


def test_temperature_one_is_identity():
    p = np.array([[0.5, 0.2, 0.2, 0.1, 0.0]])
    np.testing.assert_allclose(apply_temperature(p, 1.0), p)


def test_ambiguity_flattens():
    assert effective_kappa(4.0, 0.0) == 4.0
    assert effective_kappa(4.0, 1.0) == pytest.approx(0.8)


def test_deterministic_and_sensitive_to_inputs():
    spec = ScorerSpec()
    s = sample_scenarios("attribute", 1, 2)[0]
    a = synthetic_score(spec, s, 0, 5)
    assert a == synthetic_score(spec, s, 0, 5)
    assert a != synthetic_score(spec, s, 0, 6)
    assert a != synthetic_score(spec, s, 0, 5, draw=1)


def test_prefix_must_match_step():
    s = sample_scenarios("sorting", 1, 0)[0]
    with pytest.raises(ValueError):
        synthetic_score(ScorerSpec(), s, 1, 0, prefix=())


def test_keyed_uniforms_range_and_shape():
    u = keyed_uniforms([1, 2, 3], 0, 0)
    assert u.shape == (3, 8)
    assert (u > 0).all() and (u < 1).all()
    np.testing.assert_array_equal(u, keyed_uniforms([1, 2, 3], 0, 0))
    assert not np.array_equal(u, keyed_uniforms([1, 2, 3], 0, 0, prefixes=[("A",), (), ()]))


def test_corruption_moves_mode_off_acceptable():
    n = 4000
    spec = ScorerSpec(kappa=math.inf, rho=0.3)
    prior = np.full((n, 5), 0.2)
    acceptable = np.zeros((n, 5), dtype=bool)
    acceptable[:, 0] = True
    q = score_arrays(spec, prior, acceptable, np.zeros(n, dtype=int), np.zeros(n), np.arange(n), 3)
    wrong = q.argmax(axis=1) != 0
    assert wrong.mean() == pytest.approx(0.3, abs=0.03)
    # the wrong label is uniform over the four others
    counts = np.bincount(q.argmax(axis=1)[wrong], minlength=5)[1:]
    assert counts.min() > 0.2 * wrong.sum()


def test_reliability_deciles():
    # tau = 1, rho = 0: the emitted probability of each label is its chance of being right
    spec = ScorerSpec(kappa=4.0, rho=0.0, tau=1.0)
    probs, hits = [], []
    for setting in ("numeric", "spatial"):
        b = sample_batch(setting, 25_000, 21)
        q = score_arrays(spec, b.prior, b.acceptable, b.truth, b.ambiguity, b.keys, 8)
        probs.append(q.ravel())
        hits.append(b.acceptable.ravel())
    p, y = np.concatenate(probs), np.concatenate(hits)
    bins = np.minimum((p * 10).astype(int), 9)
    for k in range(10):
        sel = bins == k
        if sel.sum() >= 500:
            assert abs(p[sel].mean() - y[sel].mean()) <= 0.03, k


def test_synthetic_usage_errors():
    llm = ScorerSpec(kind="llm", endpoint="http://x", model="m")
    with pytest.raises(ScorerUsageError):
        synthetic_score(llm, kitchen_scenario(), 0, 0)
    with pytest.raises(ScorerUsageError):
        SyntheticScorer(llm)
    with pytest.raises(ScorerUsageError):
        llm_score(ScorerSpec(), build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None))


@pytest.mark.parametrize("bad", [dict(kappa=0), dict(rho=1.0), dict(tau=0), dict(kind="x"), dict(kind="llm")])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        ScorerSpec(**bad)


def test_spec_round_trip():
    spec = ScorerSpec(kappa=math.inf, rho=0.1, tau=2.0)
    assert ScorerSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    assert ScorerSpec.from_dict({"kappa": "inf"}).kappa == math.inf


# -- prompts ----------------------------------------------------------------

def test_identity_prompt_keeps_order():
    p = build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None)
    assert p.shown == KITCHEN_OPTIONS + (OPTION_E_TEXT,)


@pytest.mark.parametrize("seed,golden", [(None, "kitchen_prompt.txt"), (5, "kitchen_prompt_seed5.txt")])
def test_prompt_golden(seed, golden):
    p = build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, seed)
    assert p.render() + "\n" == (DATA / golden).read_text()


@given(st.integers(min_value=0, max_value=2**32))
def test_unpermute_restores_generation_order(seed):
    p = build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, seed)
    assert p.options[-1] == OPTION_E_TEXT
    positions = [p.shown.index(text) for text in p.options]
    scores = p.unpermute([float(j) for j in range(5)])
    assert list(scores) == [float(j) for j in positions]


def test_prompt_needs_four_options():
    with pytest.raises(ValueError):
        build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS[:3], None)


# -- response parsing -----------------------------------------------------

def response(top):
    return {"choices": [{"text": " A", "logprobs": {"top_logprobs": [top]}}]}


def test_missing_labels_get_zero():
    probs = parse_label_logprobs(response({"A": math.log(0.6), "B": math.log(0.2)}))
    assert probs == pytest.approx((0.75, 0.25, 0.0, 0.0, 0.0))
    assert probs[2:] == (0.0, 0.0, 0.0)


def test_token_variants():
    probs = parse_label_logprobs(response({" A": math.log(0.3), "B)": math.log(0.3), " C )": math.log(0.3),
                                           "the": math.log(0.1)}))
    assert probs == pytest.approx((1 / 3, 1 / 3, 1 / 3, 0.0, 0.0))


def test_protocol_and_degenerate_errors():
    with pytest.raises(ProtocolError):
        parse_label_logprobs({"choices": [{"text": "A"}]})
    with pytest.raises(ProtocolError):
        parse_label_logprobs({})
    with pytest.raises(DegenerateResponseError):
        parse_label_logprobs(response({"yes": -0.1, "no": -2.0}))


# -- stub completion endpoint ---------------------------------------------

class Stub:
    """Queue of (status, body) replies; records every request it sees."""

    def __init__(self):
        self.replies = []
        self.requests = []
        self.default = (200, response({"A": math.log(0.5), "B": math.log(0.3), "C": math.log(0.2)}))


@pytest.fixture
def stub():
    state = Stub()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            state.requests.append((self.path, dict(self.headers), body))
            status, doc = state.replies.pop(0) if state.replies else state.default
            raw = doc.encode() if isinstance(doc, str) else json.dumps(doc).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state.url = f"http://127.0.0.1:{server.server_address[1]}/v1"
    yield state
    server.shutdown()
    server.server_close()


def llm_spec(url, **kw):
    return ScorerSpec(kind="llm", endpoint=url, model="stub-model", timeout=5, retries=2, **kw)


def test_stub_request_and_exact_vector(stub, monkeypatch):
    monkeypatch.setenv("LLM_API_KEY", "secret-token")
    prompt = build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None)
    conf = llm_score(llm_spec(stub.url), prompt)
    assert conf.scores == pytest.approx((0.5, 0.3, 0.2, 0.0, 0.0), abs=1e-15)
    path, headers, body = stub.requests[0]
    assert path == "/v1/completions"
    assert headers["Authorization"] == "Bearer secret-token"
    assert body == {"model": "stub-model", "prompt": prompt.render(), "max_tokens": 1, "temperature": 0, "logprobs": 5}


def test_permuted_position_maps_to_canonical(stub):
    prompt = build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, 5)
    conf = llm_score(llm_spec(stub.url), prompt)
    # shown position A holds generation index permutation[0]
    canonical = LABELS[prompt.permutation[0]]
    assert conf[canonical] == pytest.approx(0.5)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 5, 8])
def test_unpermutation_consistent_across_orders(stub, seed):
    # the stub answers by option text, so every order should agree once inverted
    base = build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None)
    truth = dict(zip(base.options, (0.1, 0.4, 0.2, 0.25, 0.05)))
    perm = build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, seed)
    for p in (base, perm):
        stub.replies.append((200, response({LABELS[j]: math.log(truth[t]) for j, t in enumerate(p.shown)})))
    a = llm_score(llm_spec(stub.url), base)
    b = llm_score(llm_spec(stub.url), perm)
    assert a.scores == pytest.approx(b.scores, abs=1e-15)


def test_retries_then_succeeds(stub):
    stub.replies += [(503, "{}"), (429, "{}")]
    conf = llm_score(llm_spec(stub.url), build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None))
    assert len(stub.requests) == 3
    assert conf["A"] == pytest.approx(0.5)


def test_transport_error_after_retries(stub):
    stub.replies += [(500, "{}")] * 3
    with pytest.raises(TransportError):
        llm_score(llm_spec(stub.url), build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None))
    assert len(stub.requests) == 3


def test_unreachable_endpoint():
    spec = ScorerSpec(kind="llm", endpoint="http://127.0.0.1:9", model="m", timeout=1, retries=0)
    with pytest.raises(TransportError):
        llm_score(spec, build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None))


def test_client_error_is_protocol_error(stub):
    stub.replies.append((400, "{}"))
    with pytest.raises(ProtocolError):
        llm_score(llm_spec(stub.url), build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None))


def test_non_json_is_protocol_error(stub):
    stub.replies.append((200, "not json"))
    with pytest.raises(ProtocolError):
        llm_score(llm_spec(stub.url), build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None))


def test_missing_logprobs_is_protocol_error(stub):
    stub.replies.append((200, {"choices": [{"text": "A"}]}))
    with pytest.raises(ProtocolError):
        llm_score(llm_spec(stub.url), build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None))


def test_completion_text(stub):
    stub.replies.append((200, {"choices": [{"text": "A, C"}]}))
    assert llm_complete(llm_spec(stub.url), "prompt", max_tokens=8) == "A, C"
    assert "logprobs" not in stub.requests[0][2]


def test_api_key_never_logged(stub, monkeypatch, caplog):
    monkeypatch.setenv("LLM_API_KEY", "do-not-print-me")
    stub.replies += [(503, "{}")]
    with caplog.at_level(logging.DEBUG):
        llm_score(llm_spec(stub.url), build_mcqa_prompt(kitchen_scenario(), KITCHEN_OPTIONS, None))
    assert "do-not-print-me" not in caplog.text


def test_scorer_objects(stub):
    s = kitchen_scenario()
    assert isinstance(make_scorer(ScorerSpec()), SyntheticScorer)
    llm = make_scorer(llm_spec(stub.url))
    assert isinstance(llm, LlmScorer)
    assert sum(llm.score(s, 0, (), 0).scores) == pytest.approx(1.0)
