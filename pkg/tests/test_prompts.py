import pytest

from vlmrerank.datamodel import AerialCandidate, GroundQuery, StrategyId
from vlmrerank.prompts import (
    AERIAL,
    AERIAL1,
    AERIAL2,
    GROUND,
    ImagePart,
    PromptError,
    PromptTemplate,
    TextPart,
    UnresolvableImage,
    get_template,
    render_pairwise,
    render_pointwise,
    render_reason_followup,
    resolve_image,
)

from .conftest import FIXTURES

REFERENCE = FIXTURES / "reference_prompts"


@pytest.fixture
def pair(tmp_path):
    for name in ("g.jpg", "a.png", "b.png"):
        (tmp_path / name).write_bytes(name.encode())
    q = GroundQuery("q1", "g.jpg")
    a = AerialCandidate("A", "a.png", 1)
    b = AerialCandidate("B", "b.png", 2)
    return tmp_path, q, a, b


def _elided(fixture_text: str) -> str:
    for ph in (GROUND, AERIAL1, AERIAL2, AERIAL):
        fixture_text = fixture_text.replace(ph, "")
    return fixture_text


@pytest.mark.parametrize("strategy", [s for s in StrategyId if s.is_pointwise])
def test_pointwise_render_matches_reference_bytes(pair, strategy):
    root, q, a, _ = pair
    msg = render_pointwise(strategy, q, a, root)
    expected = (REFERENCE / f"{strategy.value}.txt").read_bytes().decode("utf-8")
    assert msg.text.encode("utf-8") == _elided(expected).encode("utf-8")
    assert [p.ref for p in msg.images] == [str((root / "g.jpg").resolve()), str((root / "a.png").resolve())]


def test_pairwise_render_matches_reference_bytes(pair):
    root, q, a, b = pair
    msg = render_pairwise(q, a, b, root)
    expected = (REFERENCE / "pairwise.txt").read_bytes().decode("utf-8")
    assert msg.text.encode("utf-8") == _elided(expected).encode("utf-8")
    assert [p.ref for p in msg.images] == [str((root / n).resolve()) for n in ("g.jpg", "a.png", "b.png")]
    assert msg.text.endswith('like this: {"preference": "<1 or 2>"}')


@pytest.mark.parametrize("strategy", list(StrategyId))
def test_packaged_templates_equal_fixtures(strategy):
    assert get_template(strategy).text.encode("utf-8") == (REFERENCE / f"{strategy.value}.txt").read_bytes()


def test_prompt_endings(pair):
    root, q, a, _ = pair
    # the reference Yes/No prompt uses typographic quotes; the reasoning prompt uses straight ones
    assert render_pointwise("yesno", q, a, root).text.endswith("Answer ONLY with the single word ‘Yes’ or ‘No’.")
    assert render_pointwise("reason_yesno", q, a, root).text.endswith("Answer ONLY with the single word 'Yes' or 'No'.")
    assert render_pointwise("likert", q, a, root).text.endswith("Respond ONLY with a single digit (1, 2, 3, 4, or 5).")
    assert "between 0 (no match) and 100 (perfect match)" in render_pointwise("direct", q, a, root).text


def test_images_sit_at_placeholders(pair):
    root, q, a, _ = pair
    msg = render_pointwise("direct", q, a, root)
    kinds = [type(p).__name__ for p in msg.parts]
    assert kinds == ["TextPart", "ImagePart", "TextPart", "ImagePart", "TextPart"]
    assert msg.parts[0].text.endswith("query image:\n\n'")
    assert msg.parts[2].text == "'\n\nHere is a candidate satellite image:\n\n'"


def test_render_is_deterministic(pair):
    root, q, a, b = pair
    assert render_pointwise("likert", q, a, root) == render_pointwise("likert", q, a, root)
    assert render_pairwise(q, a, b, root) == render_pairwise(q, a, b, root)


def test_swapping_pair_swaps_only_aerial_slots(pair):
    root, q, a, b = pair
    ab, ba = render_pairwise(q, a, b, root), render_pairwise(q, b, a, root)
    assert ab.text == ba.text
    assert ab.images[0] == ba.images[0]
    assert (ab.images[1], ab.images[2]) == (ba.images[2], ba.images[1])


def test_pairwise_rejects_same_candidate(pair):
    root, q, a, _ = pair
    with pytest.raises(PromptError):
        render_pairwise(q, a, a, root)


def test_pointwise_rejects_pairwise_strategy(pair):
    root, q, a, _ = pair
    with pytest.raises(PromptError):
        render_pointwise("pairwise", q, a, root)


def test_unresolvable_image(pair):
    root, q, _, _ = pair
    with pytest.raises(UnresolvableImage):
        render_pointwise("yesno", q, AerialCandidate("Z", "missing.png", 1), root)


def test_remote_and_data_refs_pass_through():
    assert resolve_image("https://x.org/s/1.png?sig=2") == ImagePart("image/png", "https://x.org/s/1.png?sig=2")
    assert resolve_image("data:image/jpeg;base64,AAAA").media_type == "image/jpeg"


def test_template_arity_checked():
    with pytest.raises(PromptError):
        PromptTemplate(StrategyId.YESNO, "only <GROUNDIMAGE> here")
    with pytest.raises(PromptError):
        PromptTemplate(StrategyId.PAIRWISE, "<GROUNDIMAGE> <AERIALIMAGE>")


def test_reason_followup_conversation(pair):
    root, q, a, _ = pair
    first = render_pointwise("reason_yesno", q, a, root)
    convo = render_reason_followup(first, "Roads line up.")
    assert [m.role for m in convo] == ["user", "assistant", "user"]
    assert convo[1].parts == (TextPart("Roads line up."),)
    assert convo[2].text.endswith("Answer ONLY with the single word 'Yes' or 'No'.")
