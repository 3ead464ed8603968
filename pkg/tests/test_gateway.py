import json
import threading

import httpx
import pytest

from adcut.clip_repr import ReprConfig, build_representations
from adcut.gateway import (
    AugmentedInput,
    AuditLog,
    BackendRefusal,
    BackendResponse,
    BackendTimeout,
    CacheMiss,
    ChatPrompt,
    MockBackend,
    RemoteBackend,
    ReplayCache,
    SampleSkipped,
    TextPart,
    assemble_request,
    augment_with_supplementary,
    generate,
    run_bounded,
)


@pytest.fixture
def reps(six_clip_manifest):
    return build_representations(six_clip_manifest, ReprConfig())


def test_request_mentions_each_index_once(six_clip_manifest, reps):
    req = assemble_request(six_clip_manifest.product, reps, k=4)
    text = req.to_prompt().text
    for i in range(1, 7):
        assert text.count(f"Clip {i}:") == 1
    assert "Use exactly 4 clips." in text


def test_request_layout(six_clip_manifest, reps):
    parts = assemble_request(six_clip_manifest.product, reps).to_prompt().parts
    assert parts[0].text.startswith("Product: 醇香巧克力")
    assert parts[1].text == "Clip 1:"
    assert parts[2].resolution == (996, 560)
    assert parts[-1].text.startswith("You are an advertisement video editor")


@pytest.mark.parametrize("k", [0, 7, -1])
def test_k_out_of_range(six_clip_manifest, reps, k):
    with pytest.raises(ValueError, match="k must be"):
        assemble_request(six_clip_manifest.product, reps, k=k)


def test_empty_clip_list(six_clip_manifest):
    with pytest.raises(ValueError, match="no clips"):
        assemble_request(six_clip_manifest.product, [])


def test_assembly_is_byte_deterministic(six_clip_manifest, reps):
    a = assemble_request(six_clip_manifest.product, reps, k=4, seed=3)
    b = assemble_request(six_clip_manifest.product, list(reversed(reps)), k=4, seed=3)
    assert a.serialize().encode() == b.serialize().encode()
    assert a.to_prompt().key() == b.to_prompt().key()


def test_prompt_key_depends_on_image_content(tmp_path, six_clip_manifest, reps):
    req = assemble_request(six_clip_manifest.product, reps)
    key = req.to_prompt().key()
    from PIL import Image

    Image.new("RGB", (16, 9), (0, 0, 0)).save(reps[0][1].spatial.path)
    assert req.to_prompt().key() != key


def test_mock_keyed_by_request_hash(six_clip_manifest, reps):
    req = assemble_request(six_clip_manifest.product, reps)
    backend = MockBackend({req.to_prompt().key(): "scripted reply"})
    assert generate(req, backend).raw_text == "scripted reply"
    other = assemble_request(six_clip_manifest.product, reps, k=2)
    with pytest.raises(BackendRefusal):
        generate(other, backend)


def _chat_reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}, "finish_reason": "stop"}],
                                     "usage": {"prompt_tokens": 10, "completion_tokens": 3}})


def test_remote_backend_sends_images_and_auth(tmp_path, six_clip_manifest, reps):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return _chat_reply("[]")

    backend = RemoteBackend(api_key="sk-test", base_url="http://model.test/v1", transport=httpx.MockTransport(handler),
                            image_cache=None)
    req = assemble_request(six_clip_manifest.product, reps[:1])
    resp = generate(req, backend)
    assert resp.raw_text == "[]"
    assert resp.usage == {"prompt_tokens": 10, "completion_tokens": 3}
    assert seen["auth"] == "Bearer sk-test"
    content = seen["body"]["messages"][0]["content"]
    images = [c for c in content if c["type"] == "image_url"]
    assert len(images) == 1 + 5
    assert images[0]["image_url"]["url"].startswith("data:image/png;base64,")


def test_remote_transport_failure_reports_attempts():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("connection refused", request=request)

    sleeps = []
    backend = RemoteBackend(base_url="http://down.test", max_attempts=3, transport=httpx.MockTransport(handler),
                            sleep=sleeps.append, backoff_s=0.5)
    with pytest.raises(Exception) as info:
        backend.complete(ChatPrompt((TextPart("hi"),)))
    assert type(info.value).__name__ == "TransportError"
    assert info.value.attempts == 3
    assert len(calls) == 3
    assert sleeps == [0.5, 1.0]


def test_remote_timeout_is_distinct():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    backend = RemoteBackend(base_url="http://slow.test", max_attempts=2, transport=httpx.MockTransport(handler),
                            sleep=lambda s: None)
    with pytest.raises(BackendTimeout) as info:
        backend.complete(ChatPrompt((TextPart("hi"),)))
    assert info.value.attempts == 2


def test_remote_refusal_is_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(400, json={"error": "bad request"})

    backend = RemoteBackend(base_url="http://x.test", transport=httpx.MockTransport(handler), sleep=lambda s: None)
    with pytest.raises(BackendRefusal) as info:
        backend.complete(ChatPrompt((TextPart("hi"),)))
    assert info.value.status == 400
    assert len(calls) == 1


def test_remote_retries_server_errors_then_succeeds():
    replies = iter([httpx.Response(503), httpx.Response(429), _chat_reply("ok")])
    backend = RemoteBackend(base_url="http://x.test", transport=httpx.MockTransport(lambda r: next(replies)),
                            sleep=lambda s: None)
    assert backend.complete(ChatPrompt((TextPart("hi"),))).raw_text == "ok"


def test_content_filter_is_a_refusal():
    body = {"choices": [{"message": {"content": None}, "finish_reason": "content_filter"}]}
    backend = RemoteBackend(base_url="http://x.test", transport=httpx.MockTransport(lambda r: httpx.Response(200, json=body)))
    with pytest.raises(BackendRefusal):
        backend.complete(ChatPrompt((TextPart("hi"),)))


def test_replay_cache_second_call_makes_no_network_call(tmp_path, six_clip_manifest, reps):
    network = []

    def handler(request):
        network.append(1)
        return _chat_reply("cached text")

    remote = RemoteBackend(base_url="http://x.test", transport=httpx.MockTransport(handler))
    cache = ReplayCache(tmp_path / "cache", remote)
    req = assemble_request(six_clip_manifest.product, reps[:2])
    first = generate(req, cache)
    second = generate(req, cache)
    assert first == second
    assert len(network) == 1
    # a fresh replay-only cache serves the recording without any backend
    assert generate(req, ReplayCache(tmp_path / "cache")) == first


def test_replay_only_miss(tmp_path):
    with pytest.raises(CacheMiss):
        ReplayCache(tmp_path).complete(ChatPrompt((TextPart("never recorded"),)))


def test_replay_cache_concurrent_access(tmp_path):
    inner = MockBackend(responder=lambda p: p.text.upper())
    cache = ReplayCache(tmp_path, inner)
    prompts = [ChatPrompt((TextPart(f"q{i % 3}"),)) for i in range(30)]
    outcomes = run_bounded(cache.complete, prompts, concurrency=8)
    assert all(o.ok for o in outcomes)
    assert inner.calls == 3
    assert [o.value.raw_text for o in outcomes] == [p.text.upper() for p in prompts]


def test_audit_log_records_pairs(tmp_path):
    backend = AuditLog(MockBackend(default="hello"), tmp_path / "audit")
    prompt = ChatPrompt((TextPart("hi"),))
    backend.complete(prompt)
    record = json.loads((tmp_path / "audit" / f"{prompt.key()}.json").read_text())
    assert record["request"] == [{"type": "text", "text": "hi"}]
    assert record["response"]["raw_text"] == "hello"


def test_backend_response_round_trip():
    r = BackendResponse("x", {"a": 1}, 12, "remote:gpt")
    assert BackendResponse.from_dict(r.to_dict()) == r


def _script_of(prompt):
    return prompt.text.split("Script:\n", 1)[1].strip()


def test_identity_rewriter(six_clip_manifest, reps):
    req = assemble_request(six_clip_manifest.product, reps[:4])
    scripts = {1: "今天推荐巧克力", 2: "丝滑好吃", 3: "低糖健康", 4: "赶紧下单"}
    rewriter = MockBackend(responder=_script_of)
    aug = augment_with_supplementary(req, scripts, rewriter)
    assert aug.supplementary == scripts
    assert rewriter.calls == 4
    full = aug.to_request()
    assert full.has_supplementary()
    assert "Clip 2 supplementary information: 丝滑好吃" in full.to_prompt().text
    assert not req.has_supplementary()


def test_clip_without_script_gets_no_supplementary(six_clip_manifest, reps):
    req = assemble_request(six_clip_manifest.product, reps[:3])
    rewriter = MockBackend(responder=_script_of)
    aug = augment_with_supplementary(req, {1: "甲", 3: "丙"}, rewriter)
    assert set(aug.supplementary) == {1, 3}
    assert rewriter.calls == 2


def test_rewriter_failure_skips_with_reason(six_clip_manifest, reps):
    req = assemble_request(six_clip_manifest.product, reps[:2])
    with pytest.raises(SampleSkipped, match="clip 1"):
        augment_with_supplementary(req, {1: "甲"}, MockBackend())


def test_supplementary_must_target_known_clips(six_clip_manifest, reps):
    req = assemble_request(six_clip_manifest.product, reps[:2])
    with pytest.raises(ValueError):
        AugmentedInput(req, {5: "x"})


def test_run_bounded_respects_limit_and_order():
    active = 0
    peak = 0
    lock = threading.Lock()
    gate = threading.Event()

    def work(i):
        nonlocal active, peak
        with lock:
            active += 1
            peak = max(peak, active)
        gate.wait(0.01)
        with lock:
            active -= 1
        if i == 5:
            raise RuntimeError("boom")
        return i * i

    outcomes = run_bounded(work, range(20), concurrency=3)
    assert peak <= 3
    assert [o.value for o in outcomes if o.ok] == [i * i for i in range(20) if i != 5]
    assert isinstance(outcomes[5].error, RuntimeError)
