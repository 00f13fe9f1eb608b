import numpy as np
import pytest

from treefed.aggregation import AttentionConfig, similarity_score
from treefed.residual import (
    KeyCache,
    ResidualPacket,
    partition_residuals,
    route_residuals,
    split_by_ceiling,
)
from treefed.tensors import ParamSet, Tensor, flatten
from treefed.topology import FederationTree

FIG2 = {0: [1, 2], 1: [3, 4], 2: [5, 6]}


def t(name, values):
    return Tensor(name, np.array(values, dtype=np.float32))


def keys(vec, name="a"):
    return ParamSet([t(name, vec)], "keys")


def tree():
    return FederationTree.from_children_map(FIG2)


class TestPartitionResiduals:
    def test_lowest_similarity_child_selected(self):
        own = keys([1.0, 0.0])
        children = [
            (3, keys([1.0, 0.1])),   # high similarity
            (4, keys([0.05, 1.0])),  # low similarity -> selected
            (5, keys([1.0, 0.3])),
        ]
        pkts = partition_residuals(own, children, nu=1, cfg=AttentionConfig(),
                                   round_k=2, ceilings={3: 0, 4: 0, 5: 0})
        assert len(pkts) == 1
        assert pkts[0].origin == 4
        assert pkts[0].layer == "a"
        assert pkts[0].created_round == 2

    def test_nu_zero_no_packets(self):
        own = keys([1.0, 0.0])
        children = [(3, keys([0.0, 1.0]))]
        assert partition_residuals(own, children, 0, AttentionConfig(), 0, {}) == []

    def test_identical_children_suppressed_by_threshold(self):
        own = keys([1.0, 2.0])
        children = [(3, own.copy()), (4, own.copy())]
        pkts = partition_residuals(own, children, nu=2, cfg=AttentionConfig(),
                                   round_k=0, ceilings={3: 0, 4: 0})
        assert pkts == []

    def test_infinite_threshold_emits_unconditionally(self):
        own = keys([1.0, 2.0])
        children = [(3, own.copy()), (4, own.copy())]
        pkts = partition_residuals(own, children, nu=2, cfg=AttentionConfig(),
                                   round_k=0, ceilings={3: 0, 4: 0},
                                   threshold=float("inf"))
        assert len(pkts) == 2

    def test_tie_broken_by_lower_id(self):
        own = keys([1.0, 0.0])
        same = keys([0.0, 1.0])
        pkts = partition_residuals(own, [(9, same.copy()), (4, same.copy())], nu=1,
                                   cfg=AttentionConfig(), round_k=0,
                                   ceilings={9: 0, 4: 0})
        assert pkts[0].origin == 4

    def test_negative_nu_errors(self):
        with pytest.raises(ValueError):
            partition_residuals(keys([1.0]), [(3, keys([1.0]))], -1,
                                AttentionConfig(), 0, {})

    def test_per_layer_selection(self):
        own = ParamSet([t("a", [1.0, 0.0]), t("b", [0.0, 1.0])], "keys")
        c3 = ParamSet([t("a", [1.0, 0.0]), t("b", [1.0, 0.0])], "keys")
        c4 = ParamSet([t("a", [0.0, 1.0]), t("b", [0.0, 1.0])], "keys")
        pkts = partition_residuals(own, [(3, c3), (4, c4)], nu=1,
                                   cfg=AttentionConfig(), round_k=0,
                                   ceilings={3: 0, 4: 0})
        chosen = {p.layer: p.origin for p in pkts}
        assert chosen == {"a": 4, "b": 3}


def cache_for(children_vecs, round_k=0):
    return KeyCache(keys={cid: keys(v) for cid, v in children_vecs.items()},
                    round_stamp=round_k)


class TestRouteResiduals:
    def test_argmax_similarity_routing(self):
        tr = tree()
        cache = cache_for({1: [0.2, 1.0], 2: [1.0, 0.05]})
        pkt = ResidualPacket(origin=3, layer="a", tensor=t("a", [1.0, 0.0]),
                             created_round=0, ceiling=0)
        # origin 3 lives under child 1, so only child 2 is eligible anyway;
        # use an origin outside both subtrees via a third child
        tr2 = FederationTree.from_children_map({0: [1, 2, 7], 1: [3, 4], 2: [5, 6]})
        cache2 = KeyCache(keys={1: keys([0.2, 1.0]), 2: keys([1.0, 0.05])},
                          round_stamp=0)
        pkt2 = ResidualPacket(origin=7, layer="a", tensor=t("a", [1.0, 0.0]),
                              created_round=0, ceiling=0)
        out = route_residuals([pkt2], cache2, [1, 2], AttentionConfig(), tr2,
                              round_k=1, max_age=4)
        assert out.to_forward[2] == [pkt2]
        assert out.for_aggregation[1] == [] and out.to_forward[1] == []

    def test_empty_cache_buffers(self):
        tr = tree()
        pkt = ResidualPacket(origin=5, layer="a", tensor=t("a", [1.0, 0.0]),
                             created_round=0, ceiling=0)
        out = route_residuals([pkt], KeyCache(), [1, 2], AttentionConfig(), tr,
                              round_k=0, max_age=4)
        assert out.held == [pkt]
        assert not any(out.for_aggregation.values())
        assert not any(out.to_forward.values())

    def test_origin_subtree_excluded(self):
        tr = tree()
        # packet from node 3 (inside child 1's subtree); child 1 has the best
        # cached similarity but must be skipped
        cache = cache_for({1: [1.0, 0.0], 2: [0.3, 1.0]})
        pkt = ResidualPacket(origin=3, layer="a", tensor=t("a", [1.0, 0.0]),
                             created_round=0, ceiling=0)
        out = route_residuals([pkt], cache, [1, 2], AttentionConfig(), tr,
                              round_k=1, max_age=4)
        assert out.to_forward[2] == [pkt]

    def test_leaf_target_lands_in_aggregation(self):
        tr = tree()
        # mid node 2 routes among its leaf children 5, 6
        cache = KeyCache(keys={5: keys([1.0, 0.0]), 6: keys([0.0, 1.0])},
                         round_stamp=0)
        pkt = ResidualPacket(origin=4, layer="a", tensor=t("a", [0.9, 0.1]),
                             created_round=0, ceiling=0)
        out = route_residuals([pkt], cache, [5, 6], AttentionConfig(), tr,
                              round_k=1, max_age=4)
        assert out.for_aggregation[5] == [pkt]

    def test_no_eligible_child_drops(self):
        tr = FederationTree.from_children_map({0: [1], 1: [2, 3]})
        cache = KeyCache(keys={1: keys([1.0, 0.0])}, round_stamp=0)
        pkt = ResidualPacket(origin=2, layer="a", tensor=t("a", [1.0, 0.0]),
                             created_round=0, ceiling=0)
        out = route_residuals([pkt], cache, [1], AttentionConfig(), tr,
                              round_k=1, max_age=4)
        assert out.dropped == [(pkt, "origin-exclusion")]

    def test_ttl_expiry_drops(self):
        tr = tree()
        cache = cache_for({1: [1.0, 0.0], 2: [0.0, 1.0]})
        pkt = ResidualPacket(origin=5, layer="a", tensor=t("a", [1.0, 0.0]),
                             created_round=0, ceiling=0)
        out = route_residuals([pkt], cache, [1, 2], AttentionConfig(), tr,
                              round_k=9, max_age=4)
        assert out.dropped == [(pkt, "ttl")]

    def test_unknown_layer_errors(self):
        tr = tree()
        cache = cache_for({1: [1.0, 0.0], 2: [0.0, 1.0]})
        pkt = ResidualPacket(origin=5, layer="zz", tensor=t("zz", [1.0, 0.0]),
                             created_round=0, ceiling=0)
        with pytest.raises(KeyError):
            route_residuals([pkt], cache, [1, 2], AttentionConfig(), tr,
                            round_k=1, max_age=4)

    def test_randomized_against_bruteforce_router(self):
        # packets land at the argmax-similarity non-origin child in all cases
        rng = np.random.default_rng(7)
        tr = FederationTree.from_children_map({0: [1, 2, 3], 1: [4, 5], 2: [6], 3: [7]})
        cfg = AttentionConfig()
        for _ in range(1000):
            cached = {cid: keys(rng.normal(size=6)) for cid in (1, 2, 3)}
            cache = KeyCache(keys=cached, round_stamp=0)
            origin = int(rng.choice([4, 5, 6, 7]))
            pkt = ResidualPacket(origin=origin, layer="a",
                                 tensor=t("a", rng.normal(size=6)),
                                 created_round=0, ceiling=0)
            out = route_residuals([pkt], cache, [1, 2, 3], cfg, tr,
                                  round_k=1, max_age=8)
            # brute force: best cosine among children not containing origin
            best, best_sim = None, -np.inf
            for cid in (1, 2, 3):
                if tr.in_subtree(cid, origin):
                    continue
                sim = similarity_score(flatten(pkt.tensor),
                                       flatten(cached[cid]["a"]), cfg)
                if sim > best_sim:
                    best, best_sim = cid, sim
            landed = [cid for cid in (1, 2, 3)
                      if out.to_forward[cid] or out.for_aggregation[cid]]
            assert landed == [best]


class TestSplitByCeiling:
    def test_climbs_while_ceiling_above(self):
        tr = tree()
        pkt = ResidualPacket(origin=3, layer="a", tensor=t("a", [1.0]),
                             created_round=0, ceiling=0)
        up, stay = split_by_ceiling([pkt], 1, tr)  # at node 1, ceiling 0 above
        assert up == [pkt] and stay == []
        up, stay = split_by_ceiling([pkt], 0, tr)  # reached the root
        assert up == [] and stay == [pkt]

    def test_ceiling_at_mid_level(self):
        tr = tree()
        pkt = ResidualPacket(origin=3, layer="a", tensor=t("a", [1.0]),
                             created_round=0, ceiling=1)
        up, stay = split_by_ceiling([pkt], 1, tr)
        assert up == [] and stay == [pkt]


class TestKeyCache:
    def test_update_stamps_round(self):
        c = KeyCache()
        assert c.is_empty()
        c.update({3: keys([1.0])}, round_k=4)
        assert not c.is_empty()
        assert c.round_stamp == 4
        assert 3 in c.keys
