"""JSON schema for models, signals, bundles, and instrument sets.

Matrices are serialized as ``{"rows": r, "cols": c, "data": [[...]]}`` with
row-major nested lists, so files remain portable and self-describing. All
documents carry ``schema_version`` for forward compatibility.
"""
from __future__ import annotations

import hashlib
import json
from typing import Optional

import numpy as np

from .hankel import HankelBundle
from .iv import InstrumentSet, IvVariant
from .sslib import ControllerModel, StateSpaceModel, Trajectory

SCHEMA_VERSION = 1


def matrix_to_json(M: np.ndarray) -> dict:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {"rows": int(M.shape[0]), "cols": int(M.shape[1]), "data": M.tolist()}


def matrix_from_json(doc: dict) -> np.ndarray:
    M = np.asarray(doc["data"], dtype=float)
    if M.size == 0:
        M = M.reshape(doc["rows"], doc["cols"])
    if M.shape != (doc["rows"], doc["cols"]):
        raise ValueError(f"matrix data has shape {M.shape}, header says "
                         f"({doc['rows']}, {doc['cols']})")
    return M


def _opt_matrix(M: Optional[np.ndarray]):
    return None if M is None else matrix_to_json(M)


def _opt_from(doc):
    return None if doc is None else matrix_from_json(doc)


def model_to_json(model: StateSpaceModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "type": "state_space_model",
        "A": matrix_to_json(model.A),
        "B": matrix_to_json(model.B),
        "C": matrix_to_json(model.C),
        "D": matrix_to_json(model.D),
        "K": _opt_matrix(model.K),
    }


def model_from_json(doc: dict) -> StateSpaceModel:
    return StateSpaceModel(A=matrix_from_json(doc["A"]), B=matrix_from_json(doc["B"]),
                           C=matrix_from_json(doc["C"]), D=matrix_from_json(doc["D"]),
                           K=_opt_from(doc.get("K")))


def controller_to_json(ctrl: ControllerModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "type": "controller_model",
        "A": matrix_to_json(ctrl.A),
        "B": matrix_to_json(ctrl.B),
        "C": matrix_to_json(ctrl.C),
        "D": matrix_to_json(ctrl.D),
    }


def controller_from_json(doc: dict) -> ControllerModel:
    return ControllerModel(A=matrix_from_json(doc["A"]), B=matrix_from_json(doc["B"]),
                           C=matrix_from_json(doc["C"]), D=matrix_from_json(doc["D"]))


def trajectory_to_json(traj: Trajectory) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "type": "trajectory",
        "u": matrix_to_json(traj.u),
        "y": matrix_to_json(traj.y),
        "r": matrix_to_json(traj.r) if traj.r.shape[0] else None,
        "e": matrix_to_json(traj.e) if traj.e.shape[0] else None,
    }


def trajectory_from_json(doc: dict) -> Trajectory:
    r = _opt_from(doc.get("r"))
    e = _opt_from(doc.get("e"))
    return Trajectory(u=matrix_from_json(doc["u"]), y=matrix_from_json(doc["y"]),
                      r=r if r is not None else np.zeros((0, 0)),
                      e=e if e is not None else np.zeros((0, 0)))


def bundle_to_json(bundle: HankelBundle) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "type": "hankel_bundle",
        "L_p": bundle.L_p,
        "L_f": bundle.L_f,
        "m": bundle.m,
        "p": bundle.p,
        "block_order": "inputs_then_outputs",
        "U_p": matrix_to_json(bundle.U_p),
        "Y_p": matrix_to_json(bundle.Y_p),
        "U_f": matrix_to_json(bundle.U_f),
        "Y_f": matrix_to_json(bundle.Y_f),
        "R_f": _opt_matrix(bundle.R_f),
        "E_f": _opt_matrix(bundle.E_f),
    }


def bundle_from_json(doc: dict) -> HankelBundle:
    return HankelBundle(U_p=matrix_from_json(doc["U_p"]), Y_p=matrix_from_json(doc["Y_p"]),
                        U_f=matrix_from_json(doc["U_f"]), Y_f=matrix_from_json(doc["Y_f"]),
                        R_f=_opt_from(doc.get("R_f")), E_f=_opt_from(doc.get("E_f")),
                        L_p=doc["L_p"], L_f=doc["L_f"], m=doc["m"], p=doc["p"])


def instrument_to_json(ivset: InstrumentSet) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "type": "instrument_set",
        "variant": ivset.variant.value,
        "phi": matrix_to_json(ivset.phi),
        "omega": _opt_matrix(ivset.omega),
        "pi": _opt_matrix(ivset.pi),
        "meta": ivset.meta,
    }


def instrument_from_json(doc: dict) -> InstrumentSet:
    return InstrumentSet(variant=IvVariant(doc["variant"]), phi=matrix_from_json(doc["phi"]),
                         omega=_opt_from(doc.get("omega")), pi=_opt_from(doc.get("pi")),
                         meta=doc.get("meta", {}))


def canonical_dumps(doc) -> str:
    """Key-sorted compact JSON; the basis for config fingerprints."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint(doc) -> str:
    """SHA-256 hex digest of the canonical JSON serialization."""
    return hashlib.sha256(canonical_dumps(doc).encode("utf-8")).hexdigest()
