import pytest

from clta.config import dump_config, load_config, parse_config, validate_config
from clta.errors import FormatError, ParameterError


class TestParsing:
    def test_empty_document_yields_defaults(self):
        cfg = parse_config("")
        assert cfg.data.kind == "synthetic"
        assert cfg.data.n_tasks == 2
        assert cfg.kd.variant == "global"
        assert cfg.kd.weight == 10.0
        assert cfg.strategy.kind == "frozen"
        assert cfg.train.epochs == 20
        assert cfg.train.lr_decay_epochs == (6, 12, 16)
        assert cfg.seeds == (0,)
        assert cfg.workers == 1

    def test_comments_and_blank_lines_are_ignored(self):
        cfg = parse_config("\n# a comment\n  \nkd.weight = 4.5  # trailing\n")
        assert cfg.kd.weight == 4.5

    def test_values_reach_the_right_subconfigs(self):
        cfg = parse_config(
            "data.n_tasks = 5\n"
            "data.dim = 24\n"
            "kd.variant = taskwise\n"
            "teacher.kind = adapt_stats\n"
            "train.decay_epochs = 4,8,12\n"
            "warmup.enabled = true\n"
            "run.seeds = 0,1,2\n"
        )
        assert cfg.data.n_tasks == 5
        assert cfg.kd.variant == "taskwise"
        assert cfg.strategy.kind == "adapt_stats"
        assert cfg.train.lr_decay_epochs == (4, 8, 12)
        assert cfg.warmup.enabled is True
        assert cfg.seeds == (0, 1, 2)

    def test_image_shape_parsing(self):
        cfg = parse_config("data.dim = none\ndata.image_shape = 1x8x8\n")
        assert cfg.data.image_shape == (1, 8, 8)
        with pytest.raises(ParameterError):
            parse_config("data.dim = none\ndata.image_shape = 8x8\n")

    def test_syntax_error_reports_the_line(self):
        with pytest.raises(FormatError) as err:
            parse_config("kd.weight = 1.0\nthis line has no equals sign\n")
        assert "line 2" in str(err.value)

    def test_unknown_key_is_named(self):
        with pytest.raises(ParameterError) as err:
            parse_config("kd.lambda = 3\n")
        assert "kd.lambda" in str(err.value)

    def test_duplicate_key_rejected(self):
        with pytest.raises(FormatError) as err:
            parse_config("kd.weight = 1\nkd.weight = 2\n")
        assert "duplicate" in str(err.value)

    def test_type_errors_name_the_key(self):
        with pytest.raises(ParameterError) as err:
            parse_config("data.n_tasks = soon\n")
        assert "data.n_tasks" in str(err.value)


class TestValidation:
    def test_negative_weight_names_the_field(self):
        with pytest.raises(ParameterError) as err:
            parse_config("kd.weight = -1\n")
        assert "kd.weight" in str(err.value)

    def test_zero_temperature_rejected(self):
        with pytest.raises(ParameterError) as err:
            parse_config("kd.temperature = 0\n")
        assert "kd.temperature" in str(err.value)

    def test_choice_fields(self):
        with pytest.raises(ParameterError):
            parse_config("model.norm = spectral\n")
        with pytest.raises(ParameterError):
            parse_config("data.kind = streaming\n")
        with pytest.raises(ParameterError):
            parse_config("corrupt.pattern = all\n")

    def test_severity_range(self):
        with pytest.raises(ParameterError) as err:
            parse_config("corrupt.severity = 9\n")
        assert "corrupt.severity" in str(err.value)

    def test_seeds_must_not_be_empty(self):
        with pytest.raises(ParameterError):
            parse_config("run.seeds = \n")

    def test_synthetic_geometry_exclusivity(self):
        with pytest.raises(ParameterError):
            parse_config("data.image_shape = 1x4x4\n")
        with pytest.raises(ParameterError):
            parse_config("data.dim = none\n")

    def test_subconfig_invariants_surface_as_config_errors(self):
        with pytest.raises(ParameterError):
            parse_config("train.epochs = 0\n")
        with pytest.raises(ParameterError):
            parse_config("train.decay_epochs = 12,6\n")
        with pytest.raises(ParameterError):
            parse_config("teacher.lr = -0.5\n")


class TestRoundTrip:
    def test_dump_then_parse_is_a_fixed_point(self):
        text = (
            "data.n_tasks = 4\n"
            "data.samples_per_class = 33\n"
            "data.shift = 0.25\n"
            "kd.variant = multiclass\n"
            "kd.weight = 2.5\n"
            "teacher.kind = pretrain_norm\n"
            "train.grad_clip = 10\n"
            "run.seeds = 3,1,4\n"
        )
        cfg = parse_config(text)
        dumped = dump_config(cfg)
        again = parse_config(dumped)
        assert dump_config(again) == dumped
        assert again.seeds == (3, 1, 4)
        assert again.train.grad_clip == 10.0

    def test_dump_mentions_every_key_once(self):
        dumped = dump_config(parse_config(""))
        keys = [line.split("=")[0].strip() for line in dumped.splitlines()]
        assert len(keys) == len(set(keys))
        assert "kd.temperature" in keys
        assert "warmup.patience" in keys
        assert dumped.endswith("\n")

    def test_defaults_round_trip(self):
        dumped = dump_config(parse_config(""))
        assert dump_config(parse_config(dumped)) == dumped


class TestFileValidation:
    def test_idx_kind_requires_existing_files(self, tmp_path):
        cfg = parse_config("data.kind = idx\n")
        with pytest.raises(ParameterError) as err:
            validate_config(cfg)
        assert "data.images" in str(err.value)

        missing = parse_config(
            "data.kind = idx\n"
            f"data.images = {tmp_path / 'nope.idx'}\n"
            f"data.labels = {tmp_path / 'nope2.idx'}\n"
            f"data.test_images = {tmp_path / 'nope3.idx'}\n"
            f"data.test_labels = {tmp_path / 'nope4.idx'}\n"
        )
        with pytest.raises(ParameterError) as err:
            validate_config(missing)
        assert "not found" in str(err.value)

    def test_synthetic_kind_needs_no_files(self):
        validate_config(parse_config(""))

    def test_load_config_reads_files(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("run.config_id = from_file\n")
        assert load_config(path).config_id == "from_file"
