import itertools
import json
import logging

import numpy as np
import pytest

from stubserver import StubServer, echo
from navfuse import histpolicy as hp
from navfuse import student as sp
from navfuse.backends import (
    ExpertBackend,
    HistPolicyBackend,
    RandomBackend,
    RemoteBackend,
    RemoteConfig,
    RemoteError,
    RemoteHTTPError,
    StudentBackend,
    episode_seed,
    remote_act,
    resolve_llm_url,
)
from navfuse.expert import make_episodes
from navfuse.gridworld import observe, step
from navfuse.promptfmt import extract_tag, parse_distribution, serialize_distribution

OUTPUT_SENTENCE = (
    "Stop with probability 0.03, move forward with probability 0.55, turn left with probability 0.38, "
    "turn right with probability 0.00, look up with probability 0.03, and look down with probability 0.01"
)


@pytest.fixture(scope="module")
def episodes(small_maps):
    return make_episodes(small_maps, 2, seed=3)


@pytest.fixture(scope="module")
def hist():
    return hp.init_params(1, 8)


def _obs(ep):
    return observe(ep.grid, ep.start, ep, None, False)


def _rollout(backend, ep, n=15):
    return list(itertools.islice(_stepper(backend, ep), n))


def test_act_before_reset_is_an_error(hist, episodes):
    for b in (ExpertBackend(), RandomBackend(0), HistPolicyBackend(hist)):
        with pytest.raises(RuntimeError, match="before reset"):
            b.act(_obs(episodes[0]), pose=episodes[0].start)


def test_expert_backend_needs_pose(episodes):
    b = ExpertBackend()
    b.reset(episodes[0])
    with pytest.raises(ValueError):
        b.act(_obs(episodes[0]))
    d = b.act(_obs(episodes[0]), pose=episodes[0].start)
    assert sorted(d.tolist()) == [0, 0, 0, 0, 0, 1]


def test_random_backend_seeded_per_episode(episodes):
    a = _rollout(RandomBackend(4), episodes[0], 5)
    b = _rollout(RandomBackend(4), episodes[0], 5)
    c = _rollout(RandomBackend(5), episodes[0], 5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])
    assert all(abs(x.sum() - 1) < 1e-12 for x in a)
    assert episode_seed(1, "x") == episode_seed(1, "x") != episode_seed(1, "y")


def test_reset_clears_state(hist, episodes):
    b = HistPolicyBackend(hist)
    first = _rollout(b, episodes[0])
    _rollout(b, episodes[1])
    again = _rollout(b, episodes[0])
    assert all(np.array_equal(x, y) for x, y in zip(first, again))


def _stepper(backend, ep):
    """Generator yielding one distribution per step of an argmax rollout."""
    backend.reset(ep)
    pose, prev, coll = ep.start, None, False
    while True:
        d = backend.act(observe(ep.grid, pose, ep, prev, coll), pose=pose)
        yield d
        a = int(np.argmax(d))
        res = step(ep.grid, pose, a)
        if res.stopped:
            return
        pose, prev, coll = res.pose, a, res.collided


def test_interleaved_instances_are_isolated(hist, episodes):
    seq = [_rollout(HistPolicyBackend(hist), ep, 6) for ep in episodes[:2]]
    g1 = _stepper(HistPolicyBackend(hist), episodes[0])
    g2 = _stepper(HistPolicyBackend(hist), episodes[1])
    for t in range(min(len(seq[0]), len(seq[1]))):
        assert np.array_equal(next(g1), seq[0][t])
        assert np.array_equal(next(g2), seq[1][t])


def test_student_backend_composes_by_hand(hist, episodes):
    student = sp.init_student(sp.input_dim(hist), 2, width=16)
    b = StudentBackend(student, hist)
    ep = episodes[0]
    b.reset(ep)
    h = hp.zero_state(hist)
    pose, prev, coll = ep.start, None, False
    for _ in range(8):
        obs = observe(ep.grid, pose, ep, prev, coll)
        p_sota, h = hp.forward_step(hist, h, obs)
        want = sp.student_forward(student, hist, obs, h, p_sota)
        got = b.act(obs)
        assert np.array_equal(got, want)
        a = int(np.argmax(got))
        res = step(ep.grid, pose, a)
        if res.stopped:
            break
        pose, prev, coll = res.pose, a, res.collided


def test_student_backend_rejects_mismatched_shapes(hist):
    with pytest.raises(ValueError):
        StudentBackend(sp.init_student(5, 0, 8), hist)


def test_remote_echo_returns_p_sota(hist, episodes):
    p = np.array([0.031, 0.442, 0.277, 0.21, 0.03, 0.01])
    with StubServer(echo) as srv:
        d, fell = remote_act(RemoteConfig(srv.url), "chair", _obs(episodes[0]), "h", p)
    assert not fell
    assert np.abs(d - p).max() <= 0.01
    assert extract_tag(srv.prompts[0], "Goal") == "chair"


def test_remote_output_sentence(episodes):
    with StubServer(lambda _: (200, json.dumps({"text": OUTPUT_SENTENCE}))) as srv:
        d, fell = remote_act(RemoteConfig(srv.url), "bed", _obs(episodes[0]), "h", np.full(6, 1 / 6))
    assert not fell
    assert np.allclose(d, [0.03, 0.55, 0.38, 0.0, 0.03, 0.01])


def test_remote_garbage_falls_back_with_warning(episodes, caplog):
    p = np.full(6, 1 / 6)
    with StubServer(lambda _: (200, json.dumps({"text": "I would go left"}))) as srv:
        with caplog.at_level(logging.WARNING, logger="navfuse.backends"):
            d, fell = remote_act(RemoteConfig(srv.url, max_retries=2), "bed", _obs(episodes[0]), "h", p)
    assert fell and np.array_equal(d, p)
    assert len(srv.prompts) == 3
    assert any("p_sota" in r.message for r in caplog.records)


def test_remote_malformed_json_also_retries(episodes):
    with StubServer(lambda _: (200, "not json")) as srv:
        _, fell = remote_act(RemoteConfig(srv.url, max_retries=1), "bed", _obs(episodes[0]), "h", np.full(6, 1 / 6))
    assert fell and len(srv.prompts) == 2


def test_remote_http_error_carries_status(episodes):
    with StubServer(lambda _: (503, "overloaded")) as srv:
        with pytest.raises(RemoteHTTPError) as err:
            remote_act(RemoteConfig(srv.url), "bed", _obs(episodes[0]), "h", np.full(6, 1 / 6))
    assert err.value.status == 503 and "overloaded" in str(err.value)
    assert len(srv.prompts) == 1


def test_remote_unreachable_raises_after_retries(episodes):
    with StubServer(echo) as srv:
        url = srv.url  # the port is closed again once the server exits
    with pytest.raises(RemoteError, match="failed"):
        remote_act(RemoteConfig(url, timeout_s=2, max_retries=1), "bed", _obs(episodes[0]), "h", np.full(6, 1 / 6))


def test_remote_backend_counts_fallbacks_and_history(hist, episodes):
    replies = iter([(200, json.dumps({"text": "nope"}))] * 3)

    def reply(prompt):
        return next(replies, None) or echo(prompt)

    with StubServer(reply) as srv:
        b = RemoteBackend(RemoteConfig(srv.url, max_retries=2), hist)
        dists = _rollout(b, episodes[0], 4)
        b.close()
    assert b.fallbacks == 1
    assert extract_tag(srv.prompts[0], "History") == "no actions taken yet"
    assert extract_tag(srv.prompts[-1], "History").startswith(f"{len(dists) - 1} actions taken")
    ref = _rollout(HistPolicyBackend(hist), episodes[0], 4)
    for got, want in zip(dists, ref):
        assert np.abs(got - want).max() <= 0.01


def test_remote_config_and_url_resolution(monkeypatch):
    with pytest.raises(ValueError):
        RemoteConfig("")
    with pytest.raises(ValueError):
        RemoteConfig("http://x", timeout_s=0)
    monkeypatch.setenv("NAVFUSE_LLM_URL", "http://env")
    assert resolve_llm_url(None) == "http://env"
    assert resolve_llm_url("http://flag") == "http://flag"
    monkeypatch.delenv("NAVFUSE_LLM_URL")
    assert resolve_llm_url(None) is None


def test_echo_sentence_round_trip():
    p = np.array([0.1, 0.2, 0.3, 0.2, 0.1, 0.1])
    assert np.allclose(parse_distribution(serialize_distribution(p)), p)
