from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cryptoscan.bench import BenchmarkCase, BenchmarkSource, Complexity, GroundTruthMisuse, load_manifest
from cryptoscan.model import MisuseCategory, SourceUnit
from cryptoscan.refinery import (
    InapplicabilityKind,
    InapplicabilityRules,
    LeakLexicon,
    NeutralNamer,
    RenameCollision,
    api_sequence,
    default_leak_lexicon,
    detect_leakage,
    find_redundant,
    flag_inapplicable,
    pbe_iteration_counts,
    rename_identifiers,
    sanitize,
    split_words,
)

from support import BENCHCASES

MANIFEST = load_manifest(BENCHCASES / "manifest.json")
LEX = default_leak_lexicon()


def case_of(case_id: str, files: dict[str, str], gtms=()) -> BenchmarkCase:
    units = tuple(SourceUnit.from_text(p, t) for p, t in files.items())
    return BenchmarkCase(case_id, units, tuple(gtms), Complexity.BASIC, BenchmarkSource.CUSTOM, "b")


class TestLexicon:
    @pytest.mark.parametrize(
        "ident, words",
        [
            ("UntrustedPRNGCase1", ["untrusted", "prng", "case", "1"]),
            ("LessThan1000IterationPBE", ["less", "than", "1000", "iteration", "pbe"]),
            ("weak_hash_util", ["weak", "hash", "util"]),
        ],
    )
    def test_split(self, ident, words):
        assert split_words(ident) == words

    def test_whole_word_runs_only(self):
        assert "PBE" in LEX.find("LessThan1000IterationPBE")
        assert LEX.find("Weakling") == []
        assert LEX.find("Prngs") == []
        assert LEX.find("CaseA001") == []

    def test_prefix_must_not_leak(self):
        with pytest.raises(ValueError):
            LeakLexicon.parse("Case\n")


class TestSanitize:
    def test_bench_cases(self):
        namer = NeutralNamer()
        out = {}
        for cid in ("UntrustedPRNGCase1", "LessThan1000IterationPBE"):
            case, rmap = sanitize(MANIFEST.case(cid), namer=namer)
            out[cid] = (case, rmap)
        c1, m1 = out["UntrustedPRNGCase1"]
        c2, m2 = out["LessThan1000IterationPBE"]
        assert (c1.case_id, c2.case_id) == ("CaseA001", "CaseA002")
        assert c1.unit_paths == ("CaseA001.java",) and c1.gtms[0].unit_path == "CaseA001.java"
        assert "public class CaseA001 {" in c1.units[0].content
        assert m1.identifiers == {"UntrustedPRNGCase1": "CaseA001"}
        assert m2.case_id == ("LessThan1000IterationPBE", "CaseA002")
        for case in (c1, c2):
            assert detect_leakage(case) == []

    def test_semantics_preserved(self):
        original = MANIFEST.case("LessThan1000IterationPBE")
        case, _ = sanitize(original)
        old, new = original.units[0].content, case.units[0].content
        assert new == old.replace("LessThan1000IterationPBE", "CaseA001")
        assert pbe_iteration_counts(case.units[0]) == pbe_iteration_counts(original.units[0])

    def test_idempotent(self):
        once, _ = sanitize(MANIFEST.case("UntrustedPRNGCase1"))
        twice, rmap = sanitize(once)
        assert twice == once and not rmap

    def test_strings_and_comments_untouched(self):
        text = 'class WeakHashUtil { // WeakHashUtil here\n  String s = "WeakHashUtil"; WeakHashUtil x; }\n'
        case, _ = sanitize(case_of("C", {"WeakHashUtil.java": text}))
        assert case.units[0].content == 'class CaseA001 { // WeakHashUtil here\n  String s = "WeakHashUtil"; CaseA001 x; }\n'

    def test_consistent_across_units(self):
        files = {"a/StaticIVHolder.java": "class StaticIVHolder {}\n", "b/User.java": "class User { StaticIVHolder h; }\n"}
        case, rmap = sanitize(case_of("C", files))
        assert "CaseA001 h;" in case.units[1].content
        assert rmap.files == {"a/StaticIVHolder.java": "a/CaseA001.java"}

    def test_collision_with_existing_name(self):
        files = {"WeakKey.java": "class WeakKey { CaseA001 other; }\n"}
        with pytest.raises(RenameCollision):
            sanitize(case_of("C", files))

    def test_override_collision(self):
        files = {"A.java": "class WeakKey {}\nclass StaticSalt {}\n"}
        with pytest.raises(RenameCollision, match="both"):
            sanitize(case_of("C", files), overrides={"WeakKey": "Neutral", "StaticSalt": "Neutral"})

    def test_leaking_override(self):
        with pytest.raises(RenameCollision, match="itself leaks"):
            sanitize(case_of("C", {"A.java": "class WeakKey {}\n"}), overrides={"WeakKey": "BrokenHash2"})

    def test_python_defs(self):
        case, rmap = sanitize(case_of("C", {"m.py": "def weak_hash(x):\n    return x\n\ny = weak_hash(1)\n"}))
        assert "weak_hash" not in case.units[0].content and rmap.identifiers == {"weak_hash": "CaseA001"}

    @given(st.sampled_from(sorted(LEX.terms)), st.sampled_from(["Case", "Util", "Holder", ""]))
    def test_any_leaking_class_is_repaired(self, term, suffix):
        name = term[0].upper() + term[1:] + suffix
        case, _ = sanitize(case_of("C", {f"{name}.java": f"class {name} {{ {name} self; }}\n"}))
        assert detect_leakage(case) == []
        assert sanitize(case)[0] == case


def test_rename_identifiers_is_token_level():
    unit = SourceUnit.from_text("A.java", "int ab = a + abc; // a\n")
    assert rename_identifiers(unit, {"a": "z"}) == "int ab = z + abc; // a\n"


class TestInapplicability:
    def test_context_insensitive(self):
        (flag,) = flag_inapplicable(MANIFEST.case("UntrustedPRNGCase1"))
        assert flag.kind is InapplicabilityKind.CONTEXT_INSENSITIVE and flag.line == 4

    def test_prng_with_crypto_import_not_flagged(self):
        case = case_of("C", {"A.java": "import java.security.MessageDigest;\nclass A { Random r = new Random(); }\n"})
        assert flag_inapplicable(case) == []

    def test_obsolete_threshold(self):
        case = MANIFEST.case("LessThan1000IterationPBE")
        (flag,) = flag_inapplicable(case)
        assert flag.kind is InapplicabilityKind.OBSOLETE and flag.line == 5 and "1020" in flag.detail
        assert flag_inapplicable(case, InapplicabilityRules.load(pbe_min_iterations=1000)) == []

    @pytest.mark.parametrize(
        "path, code, count",
        [
            ("A.java", "new PBEKeySpec(pw, salt, 65536, 256);", 65536),
            ("A.java", "final int N = 500;\nnew PBEKeySpec(pw, salt, N, 128);", 500),
            ("a.py", "hashlib.pbkdf2_hmac('sha256', pw, salt, 100_000)", 100000),
            ("a.py", "hashlib.pbkdf2_hmac('sha256', pw, salt, iterations=1000)", 1000),
            ("a.py", "PBKDF2HMAC(algorithm=h, length=32, salt=s, iterations=480000)", 480000),
        ],
    )
    def test_iteration_counts(self, path, code, count):
        assert [c for _, c, _ in pbe_iteration_counts(SourceUnit.from_text(path, code))] == [count]

    def test_unresolvable_count_ignored(self):
        assert pbe_iteration_counts(SourceUnit.from_text("A.java", "new PBEKeySpec(pw, salt, cfg.n(), 1);")) == []

    def test_rules_parse(self):
        rules = InapplicabilityRules.parse("pbe_min_iterations = 600000\nprng_pattern = foo\\(\n")
        assert rules.pbe_min_iterations == 600000 and rules.prng_patterns == ("foo\\(",)

    def test_redundant(self):
        g = lambda cid: (GroundTruthMisuse(cid + "-g", MisuseCategory.BROKEN_ALGORITHM, "A.java", None),)  # noqa: E731
        a = case_of("X1", {"A.java": 'Cipher c = Cipher.getInstance("DES");\nc.init(1, k);\n'}, g("X1"))
        b = case_of("X2", {"A.java": 'Cipher x = Cipher.getInstance("DESede");\nx.init(2, key);\n'}, g("X2"))
        c = case_of("X3", {"A.java": 'MessageDigest.getInstance("MD5");\n'}, g("X3"))
        (flag,) = find_redundant([a, b, c])
        assert flag.kind is InapplicabilityKind.REDUNDANT and flag.case_ids == ("X1", "X2")
        assert api_sequence(a.units[0]) == ("Cipher.getInstance", "_.init")
