import pytest

from writerid.config import (
    ConfigError,
    PipelineConfig,
    apply_override,
    config_hash,
    load_config,
)
from writerid.manifest import ManifestError, compile_id_pattern, parse_manifest


class TestIdPattern:
    def test_writer_doc_split(self):
        m = compile_id_pattern("{writer}_{doc}").fullmatch("003_2")
        assert m.group("writer") == "003"
        assert m.group("doc") == "2"

    def test_dash_pattern(self):
        m = compile_id_pattern("{writer}-{doc}").fullmatch("0004-3")
        assert (m.group("writer"), m.group("doc")) == ("0004", "3")

    def test_language_placeholder(self):
        m = compile_id_pattern("{writer}_{doc}_{lang}").fullmatch("12_1_greek")
        assert m.group("lang") == "greek"

    def test_requires_writer_and_doc(self):
        with pytest.raises(ManifestError):
            compile_id_pattern("{writer}")
        with pytest.raises(ManifestError):
            compile_id_pattern("{writer}_{writer}")
        with pytest.raises(ManifestError):
            compile_id_pattern("{writer}_{page}")


class TestParseManifest:
    def test_basic(self, tmp_path):
        (tmp_path / "m.txt").write_text("003_2.png\nimgs/004_1.png\t greek \n")
        entries = parse_manifest(tmp_path / "m.txt")
        assert len(entries) == 2
        assert entries[0].writer_id == "003"
        assert entries[0].doc_id == "2"
        assert entries[0].key == "003_2"
        assert entries[0].path == tmp_path / "003_2.png"
        assert entries[1].path == tmp_path / "imgs" / "004_1.png"
        assert entries[1].language == "greek"

    def test_duplicate_rejected_with_line_number(self, tmp_path):
        (tmp_path / "m.txt").write_text("a_1.png\nsub/a_1.png\n")
        with pytest.raises(ManifestError, match=":2:"):
            parse_manifest(tmp_path / "m.txt")

    def test_unparseable_line_number(self, tmp_path):
        (tmp_path / "m.txt").write_text("good_1.png\nnodoc.png\n")
        with pytest.raises(ManifestError, match=":2:"):
            parse_manifest(tmp_path / "m.txt")

    def test_empty_manifest_warns(self, tmp_path, caplog):
        (tmp_path / "m.txt").write_text("# only a comment\n")
        import logging

        with caplog.at_level(logging.WARNING):
            entries = parse_manifest(tmp_path / "m.txt")
        assert entries == []
        assert any("empty" in r.message for r in caplog.records)


BASE_YAML = """
train_manifest: train.txt
test_manifest: test.txt
output_dir: out
seed: 3
encoder: sv_kl
patches:
  stride: 4
cnn:
  epochs: 2
  hidden_nodes: 16
gmm:
  components: 8
  tau: 17.5
"""


class TestConfig:
    def test_load_and_defaults(self, tmp_path):
        (tmp_path / "c.yaml").write_text(BASE_YAML)
        cfg = load_config(tmp_path / "c.yaml")
        assert cfg.seed == 3
        assert cfg.patches.stride == 4
        assert cfg.patches.max_per_doc == 2000  # default preserved
        assert cfg.cnn.epochs == 2
        assert cfg.gmm.tau == 17.5
        assert cfg.train_manifest == str(tmp_path / "train.txt")

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "c.yaml").write_text(BASE_YAML + "bogus: 1\n")
        with pytest.raises(ConfigError, match="bogus"):
            load_config(tmp_path / "c.yaml")
        (tmp_path / "c2.yaml").write_text(BASE_YAML + "gmm2:\n  x: 1\n")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c2.yaml")

    def test_missing_required_key(self, tmp_path):
        (tmp_path / "c.yaml").write_text("train_manifest: a\ntest_manifest: b\n")
        with pytest.raises(ConfigError, match="output_dir"):
            load_config(tmp_path / "c.yaml")

    def test_bad_encoder_rejected(self, tmp_path):
        (tmp_path / "c.yaml").write_text(BASE_YAML.replace("sv_kl", "magic"))
        with pytest.raises(ConfigError, match="encoder"):
            load_config(tmp_path / "c.yaml")

    def test_overrides(self, tmp_path):
        (tmp_path / "c.yaml").write_text(BASE_YAML)
        cfg = load_config(tmp_path / "c.yaml")
        apply_override(cfg, "gmm.components=64")
        apply_override(cfg, "encoder=vlad")
        apply_override(cfg, "cnn.learning_rate=0.005")
        assert cfg.gmm.components == 64
        assert cfg.encoder == "vlad"
        assert cfg.cnn.learning_rate == 0.005
        with pytest.raises(ConfigError):
            apply_override(cfg, "gmm.bogus=1")
        with pytest.raises(ConfigError):
            apply_override(cfg, "no-equals-sign")
        with pytest.raises(ConfigError):
            apply_override(cfg, "gmm=1")

    def test_hash_tracks_content(self, tmp_path):
        (tmp_path / "c.yaml").write_text(BASE_YAML)
        a = load_config(tmp_path / "c.yaml")
        b = load_config(tmp_path / "c.yaml")
        assert config_hash(a) == config_hash(b)
        apply_override(b, "seed=4")
        assert config_hash(a) != config_hash(b)

    def test_direct_construction_validates_encoder(self):
        with pytest.raises(ConfigError):
            PipelineConfig(
                train_manifest="a", test_manifest="b", output_dir="c", encoder="nope"
            )
