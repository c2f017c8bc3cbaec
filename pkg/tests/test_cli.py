"""Command line behavior: exit codes, produced files, reproducibility."""

import json

import numpy as np
import pytest

from spineseg.cli import main
from spineseg.labels import Structure
from spineseg.nifti import read_nifti, write_nifti
from spineseg.phantom import NoiseSpec, PhantomSpec
from spineseg.volume import Volume


def run_cli(*args):
    """Invoke main() and normalize argparse's SystemExit to an exit code."""
    try:
        return main([str(a) for a in args])
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2


PHANTOM_ARGS = ("--vertebrae", 4, "--seed", 5, "--dims", "160,192,32")


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ph"
    assert run_cli("phantom", "--out-dir", out, *PHANTOM_ARGS) == 0
    return out


class TestParsing:
    def test_version_exits_zero(self, capsys):
        assert run_cli("--version") == 0
        assert "spineseg" in capsys.readouterr().out

    def test_missing_subcommand_is_usage_error(self):
        assert run_cli() == 2

    def test_unknown_subcommand_is_usage_error(self):
        assert run_cli("frobnicate") == 2


class TestPhantom:
    def test_writes_all_artifacts(self, phantom_dir):
        names = {p.name for p in phantom_dir.iterdir()}
        assert names == {
            "intensity.nii.gz",
            "semantic.nii.gz",
            "instance.nii.gz",
            "labels.json",
            "run.json",
        }

    def test_run_json_records_resolved_spec(self, phantom_dir):
        run = json.loads((phantom_dir / "run.json").read_text())
        assert run["command"] == "phantom"
        assert run["seed"] == 5
        spec = PhantomSpec(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in run["config"].items()
        })
        assert spec.n_vertebrae == 4 and spec.dims == (160, 192, 32)

    def test_labels_json_covers_taxonomy(self, phantom_dir):
        entries = json.loads((phantom_dir / "labels.json").read_text())
        by_code = {e["code"]: e for e in entries}
        assert by_code[1]["name"] == "corpus"
        assert by_code[13]["name"] == "spinal_cord"

    def test_rerun_is_byte_identical(self, phantom_dir, tmp_path):
        again = tmp_path / "again"
        assert run_cli("phantom", "--out-dir", again, *PHANTOM_ARGS) == 0
        for name in ("intensity.nii.gz", "semantic.nii.gz", "instance.nii.gz"):
            assert (again / name).read_bytes() == (phantom_dir / name).read_bytes()

    def test_generated_seed_is_recorded(self, tmp_path):
        assert run_cli("phantom", "--out-dir", tmp_path / "p", "--vertebrae", 3,
                       "--dims", "160,192,32") == 0
        run = json.loads((tmp_path / "p" / "run.json").read_text())
        assert isinstance(run["seed"], int)
        assert run["config"]["seed"] == run["seed"]

    def test_fused_pair_collapses_one_instance(self, tmp_path):
        out = tmp_path / "f"
        assert run_cli("phantom", "--out-dir", out, "--vertebrae", 4, "--seed", 1,
                       "--fuse", "2,3", "--dims", "160,192,32") == 0
        inst = read_nifti(out / "instance.nii.gz").data
        vert_ids = np.unique(inst[(inst >= 1) & (inst < 100)])
        assert len(vert_ids) == 3

    def test_invalid_count_is_usage_error(self, tmp_path):
        assert run_cli("phantom", "--out-dir", tmp_path / "x", "--vertebrae", 1) == 2

    def test_bad_dims_is_usage_error(self, tmp_path):
        assert run_cli("phantom", "--out-dir", tmp_path / "x", "--dims", "1,2") == 2

    def test_column_taller_than_volume_is_usage_error(self, tmp_path):
        assert run_cli("phantom", "--out-dir", tmp_path / "x", "--vertebrae", 13) == 2

    def test_spec_file_round_trip(self, phantom_dir, tmp_path):
        spec = PhantomSpec(n_vertebrae=4, seed=5, dims=(160, 192, 32))
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(spec.to_json())
        out = tmp_path / "from_spec"
        assert run_cli("phantom", "--out-dir", out, "--spec", spec_path) == 0
        assert (out / "instance.nii.gz").read_bytes() == (
            phantom_dir / "instance.nii.gz"
        ).read_bytes()

    def test_missing_spec_file_is_usage_error(self, tmp_path):
        assert run_cli("phantom", "--out-dir", tmp_path / "x",
                       "--spec", tmp_path / "nope.json") == 2

    def test_invalid_spec_file_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"n_vertebrae": 99}))
        assert run_cli("phantom", "--out-dir", tmp_path / "x", "--spec", bad) == 2


def split_sources(gt: Volume):
    """Carve a ground-truth semantic mask into the three annotation sources."""
    base = gt.data.copy()
    base[~np.isin(base, (1, 11, 12, 14))] = 0
    base[gt.data == Structure.SPINAL_CORD] = Structure.SPINAL_CANAL
    sub = np.where(np.isin(gt.data, range(2, 10)), gt.data, 0).astype(np.uint16)
    cord = (gt.data == Structure.SPINAL_CORD).astype(np.uint16)
    return (
        gt.with_data(base, kind="semantic"),
        gt.with_data(sub, kind="semantic"),
        gt.with_data(cord, kind="semantic"),
    )


class TestFuse:
    @pytest.fixture()
    def source_paths(self, phantom_dir, tmp_path):
        gt = read_nifti(phantom_dir / "semantic.nii.gz")
        paths = []
        for name, vol in zip(("base", "sub", "cord"), split_sources(gt)):
            p = tmp_path / f"{name}.nii.gz"
            write_nifti(vol, p)
            paths.append(p)
        return paths

    def test_reassembles_split_annotation(self, phantom_dir, tmp_path, source_paths):
        out = tmp_path / "fused" / "mask.nii.gz"
        assert run_cli("fuse", "--base", source_paths[0], "--substructures",
                       source_paths[1], "--cord", source_paths[2], "--out", out) == 0
        gt = read_nifti(phantom_dir / "semantic.nii.gz").data
        fused = read_nifti(out).data
        keep = gt != Structure.ENDPLATE
        assert (fused[keep] == gt[keep]).all()

        summary = json.loads((tmp_path / "fused" / "fuse_summary.json").read_text())
        assert summary["canal_overwritten_by_cord"] == int((gt == 13).sum())
        assert summary["substructure_voxels_suppressed"] == 0
        assert summary["label_voxels"]["corpus"] == int((gt == 1).sum())
        assert (tmp_path / "fused" / "run.json").exists()

    def test_synthesized_endplates_counted(self, tmp_path):
        # corpus slab over disc slab with a one-voxel gap sheet between them
        base = np.zeros((8, 9, 8), dtype=np.uint16)
        base[1:7, 1:4, 1:7] = Structure.CORPUS
        base[1:7, 5:8, 1:7] = Structure.IVD
        empty = np.zeros_like(base)
        vol = Volume(base, (1.0, 1.0, 1.0), ("P", "I", "R"), "semantic")
        for name, arr in (("base", base), ("sub", empty), ("cord", empty)):
            write_nifti(vol.with_data(arr, kind="semantic"), tmp_path / f"{name}.nii.gz")
        out = tmp_path / "mask.nii.gz"
        assert run_cli("fuse", "--base", tmp_path / "base.nii.gz",
                       "--substructures", tmp_path / "sub.nii.gz",
                       "--cord", tmp_path / "cord.nii.gz", "--out", out) == 0
        fused = read_nifti(out).data
        assert (fused[1:7, 4, 1:7] == Structure.ENDPLATE).all()
        summary = json.loads((tmp_path / "fuse_summary.json").read_text())
        assert summary["endplate_voxels_synthesized"] == 36

    def test_missing_source_is_usage_error(self, tmp_path, source_paths):
        assert run_cli("fuse", "--base", tmp_path / "absent.nii.gz",
                       "--substructures", source_paths[1], "--cord", source_paths[2],
                       "--out", tmp_path / "o.nii.gz") == 2

    def test_mismatched_grids_fail(self, tmp_path, source_paths):
        small = Volume(np.zeros((4, 4, 4), dtype=np.uint16), (1, 1, 1),
                       ("P", "I", "R"), "semantic")
        write_nifti(small, tmp_path / "small.nii.gz")
        assert run_cli("fuse", "--base", source_paths[0],
                       "--substructures", tmp_path / "small.nii.gz",
                       "--cord", source_paths[2], "--out", tmp_path / "o.nii.gz") == 1


class TestSegment:
    def test_oracle_run_reproduces_ground_truth(self, phantom_dir, tmp_path):
        out = tmp_path / "seg"
        code = run_cli(
            "segment", "--input", phantom_dir / "intensity.nii.gz",
            "--semantic", f"oracle:{phantom_dir / 'semantic.nii.gz'}",
            "--instance", f"oracle:{phantom_dir / 'instance.nii.gz'}",
            "--out-dir", out, "--spacing", "keep",
        )
        assert code == 0
        for name in ("semantic", "instance"):
            got = read_nifti(out / f"{name}.nii.gz").data
            want = read_nifti(phantom_dir / f"{name}.nii.gz").data
            assert (got == want).all()
        run = json.loads((out / "run.json").read_text())
        assert run["command"] == "segment"
        report = run["report"]
        assert set(report["timings_s"]) == {"prepare", "semantic", "instance", "consistency"}
        assert report["processing_dims"] == [160, 192, 32]
        assert len(report["assembly"]["groups"]) == 4

    def test_noise_spec_attaches_to_oracle(self, phantom_dir, tmp_path):
        noise = tmp_path / "noise.json"
        noise.write_text(NoiseSpec(p_erosion=0.0, p_labeldrop=0.0, p_downup=0.0,
                                   seed=3).to_json())
        out = tmp_path / "seg"
        code = run_cli(
            "segment", "--input", phantom_dir / "intensity.nii.gz",
            "--semantic", f"oracle:{phantom_dir / 'semantic.nii.gz'},{noise}",
            "--instance", f"oracle:{phantom_dir / 'instance.nii.gz'}",
            "--out-dir", out, "--spacing", "keep",
        )
        assert code == 0

    def test_failing_external_predictor_exits_one(self, phantom_dir, tmp_path):
        code = run_cli(
            "segment", "--input", phantom_dir / "intensity.nii.gz",
            "--semantic", "exec:false",
            "--instance", f"oracle:{phantom_dir / 'instance.nii.gz'}",
            "--out-dir", tmp_path / "seg", "--spacing", "keep",
        )
        assert code == 1

    def test_unknown_scheme_is_usage_error(self, phantom_dir, tmp_path):
        code = run_cli(
            "segment", "--input", phantom_dir / "intensity.nii.gz",
            "--semantic", "model:weights.pt",
            "--instance", f"oracle:{phantom_dir / 'instance.nii.gz'}",
            "--out-dir", tmp_path / "seg",
        )
        assert code == 2

    def test_missing_input_is_usage_error(self, phantom_dir, tmp_path):
        code = run_cli(
            "segment", "--input", tmp_path / "absent.nii.gz",
            "--semantic", f"oracle:{phantom_dir / 'semantic.nii.gz'}",
            "--instance", f"oracle:{phantom_dir / 'instance.nii.gz'}",
            "--out-dir", tmp_path / "seg",
        )
        assert code == 2

    def test_bad_overlap_is_usage_error(self, phantom_dir, tmp_path):
        code = run_cli(
            "segment", "--input", phantom_dir / "intensity.nii.gz",
            "--semantic", f"oracle:{phantom_dir / 'semantic.nii.gz'}",
            "--instance", f"oracle:{phantom_dir / 'instance.nii.gz'}",
            "--out-dir", tmp_path / "seg", "--overlap", "1.5",
        )
        assert code == 2


class TestEvaluate:
    def test_self_comparison_is_perfect(self, phantom_dir, tmp_path, capsys):
        sem = phantom_dir / "semantic.nii.gz"
        inst = phantom_dir / "instance.nii.gz"
        json_path = tmp_path / "eval.json"
        csv_path = tmp_path / "eval.csv"
        code = run_cli("evaluate", "--pred", sem, "--ref", sem,
                       "--pred-instance", inst, "--ref-instance", inst,
                       "--json", json_path, "--csv", csv_path)
        assert code == 0
        result = json.loads(json_path.read_text())
        for entry in result["semantic"].values():
            if entry["DSC"] is not None:
                assert entry["DSC"] == 1.0
        vert = result["instances"]["vertebra"]
        assert vert["PQ"] == 1.0 and vert["TP"] == 4 and vert["FP"] == 0

        lines = csv_path.read_text().splitlines()
        assert lines[0] == "scope,DSC,RQ,SQ,PQ,ASSD"
        assert any(line.startswith("instance/vertebra,1.000000") for line in lines)

    def test_semantic_only(self, phantom_dir, tmp_path):
        sem = phantom_dir / "semantic.nii.gz"
        json_path = tmp_path / "eval.json"
        assert run_cli("evaluate", "--pred", sem, "--ref", sem, "--json", json_path) == 0
        assert "instances" not in json.loads(json_path.read_text())

    def test_one_sided_instance_args_is_usage_error(self, phantom_dir, tmp_path):
        sem = phantom_dir / "semantic.nii.gz"
        code = run_cli("evaluate", "--pred", sem, "--ref", sem,
                       "--pred-instance", phantom_dir / "instance.nii.gz",
                       "--json", tmp_path / "e.json")
        assert code == 2

    def test_grid_mismatch_leaves_no_partial_output(self, phantom_dir, tmp_path):
        small = Volume(np.zeros((4, 4, 4), dtype=np.uint16), (1, 1, 1),
                       ("P", "I", "R"), "semantic")
        write_nifti(small, tmp_path / "small.nii.gz")
        json_path = tmp_path / "eval.json"
        code = run_cli("evaluate", "--pred", phantom_dir / "semantic.nii.gz",
                       "--ref", tmp_path / "small.nii.gz", "--json", json_path)
        assert code == 1
        assert not json_path.exists()


class TestReport:
    def test_run_json_summary(self, phantom_dir, capsys):
        assert run_cli("report", phantom_dir / "run.json") == 0
        out = capsys.readouterr().out
        assert "run: phantom" in out
        assert "n_vertebrae: 4" in out

    def test_evaluation_summary(self, phantom_dir, tmp_path, capsys):
        sem = phantom_dir / "semantic.nii.gz"
        json_path = tmp_path / "eval.json"
        run_cli("evaluate", "--pred", sem, "--ref", sem, "--json", json_path)
        capsys.readouterr()
        assert run_cli("report", json_path) == 0
        out = capsys.readouterr().out
        assert "semantic metrics" in out
        assert "corpus: DSC 1.0000" in out

    def test_missing_file_is_usage_error(self, tmp_path):
        assert run_cli("report", tmp_path / "nope.json") == 2

    def test_non_json_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("not json {")
        assert run_cli("report", bad) == 2

    def test_unrecognized_payload_is_usage_error(self, tmp_path):
        weird = tmp_path / "weird.json"
        weird.write_text(json.dumps({"answer": 42}))
        assert run_cli("report", weird) == 2
