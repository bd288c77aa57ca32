from hypothesis import given, settings
from hypothesis import strategies as st

from ndbfs.nncore import (HintEntry, InodeHintCache, is_ancestor_path, join_path, split_path,
                          total_order_key)

names = st.text(alphabet="abcxyz0-_.", min_size=1, max_size=6).filter(lambda s: s not in (".", ".."))
comps = st.lists(names, max_size=6)


@given(comps)
def test_split_join_round_trip(cs):
    assert split_path(join_path(cs)) == cs


@given(comps, comps)
def test_ancestry_matches_component_prefix(a, b):
    pa, pb = join_path(a), join_path(b)
    expected = len(a) < len(b) and b[:len(a)] == a
    assert is_ancestor_path(pa, pb) == expected


@given(st.lists(comps, min_size=2, max_size=8))
def test_total_order_puts_ancestors_first(paths):
    ordered = sorted(paths, key=total_order_key)
    for i, p in enumerate(ordered):
        for q in ordered[i + 1:]:
            assert not (len(q) < len(p) and p[:len(q)] == q)


@settings(max_examples=50)
@given(st.lists(comps, max_size=20), comps)
def test_invalidate_drops_exactly_the_subtree(paths, victim):
    c = InodeHintCache()
    for k, cs in enumerate(paths):
        if cs:
            c.put(join_path(cs), HintEntry(k + 2, 1, cs[-1], 1, len(cs)))
    before = {join_path(cs) for cs in paths if cs}
    c.invalidate(join_path(victim))
    v = join_path(victim)
    kept = {p for p in before if not (p == v or is_ancestor_path(v, p))}
    assert {p for p in before if p in c} == kept
