import json
import tempfile
from pathlib import Path

from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from core.decorators import command_errors
from core.exceptions import (
    ConsistencyDivergedError, DegeneratePolicyError, ODEBlowUpError, ParameterUnidentifiableError, SpecError,
)
from core.models import RunManifest
from core.utils import prepare_run, read_json, save_run, to_jsonable, write_csv


class ExceptionTests(SimpleTestCase):
    def test_exit_codes(self):
        self.assertEqual(SpecError("bad").exit_code, 1)
        self.assertEqual(DegeneratePolicyError("dirac").exit_code, 1)
        self.assertEqual(ConsistencyDivergedError("diverged").exit_code, 2)

    def test_blow_up_carries_time(self):
        exc = ODEBlowUpError(1.25)
        self.assertEqual(exc.t, 1.25)
        self.assertIn("t=1.25", exc.message)
        self.assertEqual(exc.to_dict()["code"], "ode_blow_up")

    def test_unidentifiable_lists_params(self):
        exc = ParameterUnidentifiableError("no signal", params=["lambda_perm"])
        self.assertEqual(exc.to_dict()["detail"]["params"], ["lambda_perm"])


class OutputTests(SimpleTestCase):
    def test_csv_is_exact_and_stable(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_csv(Path(tmp) / "t.csv", ("a", "b"), [(0.1, 3), {"a": 1 / 3, "b": "x"}])
            text = path.read_text()
        self.assertEqual(text, "a,b\n0.10000000000000001,3\n0.33333333333333331,x\n")

    def test_non_finite_values_become_null(self):
        self.assertEqual(to_jsonable({"x": float("inf"), "y": [1.0, float("nan")]}), {"x": None, "y": [1.0, None]})


class RunLedgerTests(TestCase):
    def test_prepare_run_copies_input_and_writes_manifest(self):
        with tempfile.TemporaryDirectory() as tmp:
            spec = Path(tmp) / "spec.json"
            spec.write_text('{"rho": 0.5}')
            out, manifest = prepare_run("solve", spec, {"tol": 1e-9}, 7, Path(tmp) / "run")
            self.assertTrue((out / "input.json").exists())
            self.assertEqual(read_json(out / "manifest.json")["seed"], 7)
            run = save_run(manifest, "ok", {"residual": 1e-12})
        self.assertEqual(RunManifest.objects.get(pk=run.pk).overrides, {"tol": 1e-9})

    @override_settings(MFG_RECORD_RUNS=False)
    def test_recording_can_be_disabled(self):
        manifest = {"command": "solve", "spec_path": "x", "overrides": {}, "seed": 1,
                    "output_dir": "y", "tool_version": "0"}
        self.assertIsNone(save_run(manifest, "ok", {}))
        self.assertEqual(RunManifest.objects.count(), 0)


class CommandErrorsTests(SimpleTestCase):
    class _Command:
        def __init__(self, exc):
            self.exc = exc

        @command_errors
        def handle(self, *args, **options):
            raise self.exc

    def test_numerical_failure_exits_two_and_writes_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError) as ctx:
                self._Command(ConsistencyDivergedError("consistency iteration diverged")).handle(out=tmp)
            payload = json.loads((Path(tmp) / "error.json").read_text())
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertEqual(payload["code"], "consistency_diverged")

    def test_input_problems_exit_one(self):
        for exc in (SpecError("bad spec"), FileNotFoundError("missing.json")):
            with self.assertRaises(CommandError) as ctx:
                self._Command(exc).handle()
            self.assertEqual(ctx.exception.returncode, 1)
