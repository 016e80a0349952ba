//! Fixture tool corpus for tests and demos.
//!
//! Every fixture manifest names a callable understood by the
//! `toolforge-fixture-shim` test double: strict arithmetic tools, tools that
//! misbehave on purpose (silent fallback, empty output, raising), a slow tool,
//! and descriptive no-op tools used to exercise reorganization and merging.

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use serde_json::json;

pub mod scenario;

use crate::registry::{
    CategoryPath, Constraint, Entrypoint, ParamSpec, Provenance, Registry, RegistryError,
    SemanticType, ToolManifest,
};

pub const FIXTURE_TIMESTAMP: &str = "2026-01-01T00:00:00Z";

fn manifest(
    name: &str,
    description: &str,
    callable: &str,
    inputs: Vec<ParamSpec>,
    outputs: Vec<ParamSpec>,
) -> ToolManifest {
    ToolManifest {
        name: name.into(),
        description: description.into(),
        category_path: CategoryPath::root(),
        version: 1,
        inputs,
        outputs,
        entrypoint: Entrypoint {
            source: format!("{name}.py"),
            callable: callable.into(),
        },
        provenance: Provenance {
            generated_by: "fixture".into(),
            task_id: "fixtures".into(),
            created_at: FIXTURE_TIMESTAMP.into(),
        },
        tests_passed: true,
        probe: None,
    }
}

pub fn source_for(name: &str) -> Vec<u8> {
    format!("# fixture tool `{name}`; executed by the fixture shim\n").into_bytes()
}

pub fn add_manifest() -> ToolManifest {
    let mut m = manifest(
        "add",
        "Add two integers.",
        "add",
        vec![
            ParamSpec::new("a", SemanticType::Integer),
            ParamSpec::new("b", SemanticType::Integer),
        ],
        vec![ParamSpec::new("sum", SemanticType::Integer)],
    );
    m.probe = Some(json!({"a": 2, "b": 3}));
    m
}

pub fn stats_manifest() -> ToolManifest {
    let mut m = manifest(
        "stats",
        "Mean and sample standard deviation of a list of numbers.",
        "stats",
        vec![ParamSpec::new(
            "values",
            SemanticType::List {
                item: Box::new(ParamSpec::new("value", SemanticType::Number)),
            },
        )],
        vec![
            ParamSpec::new("mean", SemanticType::Number),
            ParamSpec::new("std", SemanticType::Number),
        ],
    );
    m.probe = Some(json!({"values": [1.0, 2.0, 3.0]}));
    m
}

pub fn divide_manifest() -> ToolManifest {
    manifest(
        "divide",
        "Divide a by b, raising on a zero divisor.",
        "divide",
        vec![
            ParamSpec::new("a", SemanticType::Number),
            ParamSpec::new("b", SemanticType::Number),
        ],
        vec![ParamSpec::new("quotient", SemanticType::Number)],
    )
}

/// Returns `{result: 0}` for invalid input instead of failing.
pub fn silent_fallback_manifest() -> ToolManifest {
    manifest(
        "silent_scale",
        "Doubles a number; swallows bad input and returns zero.",
        "unchecked_silent_fallback",
        vec![ParamSpec::new("x", SemanticType::Number)],
        vec![ParamSpec::new("result", SemanticType::Number)],
    )
}

/// Exits 0 with no output at all on invalid input.
pub fn empty_exit_manifest() -> ToolManifest {
    manifest(
        "quiet_echo",
        "Echoes a number; prints nothing for bad input.",
        "unchecked_empty_exit",
        vec![ParamSpec::new("x", SemanticType::Number)],
        vec![ParamSpec::new("result", SemanticType::Number)],
    )
}

pub fn slow_manifest() -> ToolManifest {
    manifest(
        "slow",
        "Sleeps for the given number of seconds.",
        "slow",
        vec![ParamSpec::new("seconds", SemanticType::Number)
            .with_constraint(Constraint::Range { min: Some(0.0), max: None })],
        vec![],
    )
}

/// A descriptive no-op tool with no parameters.
pub fn filler_manifest(name: &str, description: &str) -> ToolManifest {
    manifest(name, description, "noop", vec![], vec![])
}

/// Strict tools plus the deliberately broken ones.
pub fn core_corpus() -> Vec<ToolManifest> {
    vec![
        add_manifest(),
        stats_manifest(),
        divide_manifest(),
        silent_fallback_manifest(),
        empty_exit_manifest(),
        slow_manifest(),
    ]
}

pub fn install(registry: &Registry, manifests: &[ToolManifest]) -> Result<(), RegistryError> {
    for m in manifests {
        registry.register(m, &source_for(&m.name))?;
    }
    Ok(())
}

/// 25 flat tools in three name families (12 geometry, 7 energy, 6 plotting).
pub fn flat_corpus() -> Vec<ToolManifest> {
    let mut out = Vec::new();
    let geometry = [
        "align", "center", "rotate", "translate", "smiles_to_xyz", "read_xyz", "write_xyz",
        "bond_lengths", "bond_angles", "dihedrals", "rmsd", "point_group",
    ];
    for g in geometry {
        out.push(filler_manifest(
            &format!("geometry_{g}"),
            &format!("Geometry utility: {}.", g.replace('_', " ")),
        ));
    }
    for e in ["single_point", "optimize", "frequencies", "thermo", "dipole", "charges", "gap"] {
        out.push(filler_manifest(
            &format!("energy_{e}"),
            &format!("Electronic structure step: {}.", e.replace('_', " ")),
        ));
    }
    for p in ["line", "scatter", "heatmap", "histogram", "orbitals", "spectrum"] {
        out.push(filler_manifest(
            &format!("plot_{p}"),
            &format!("Plotting helper: {p} figure."),
        ));
    }
    out
}

/// Names of the three near-duplicate pairs in [`merge_corpus`].
pub const MERGE_PAIRS: [(&str, &str); 3] = [
    ("dft_single_point_energy", "dft_single_point_energy_solvated"),
    ("dft_geometry_optimization", "dft_geometry_optimization_solvated"),
    ("hessian_vibrational_thermochemistry", "hessian_vibrational_analysis"),
];

fn molecule_inputs() -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("xyz_path", SemanticType::FilePath),
        ParamSpec::new("charge", SemanticType::Integer),
        ParamSpec::new("spin", SemanticType::Integer),
        ParamSpec::new("basis", SemanticType::String),
    ]
}

/// 18 tools: three near-duplicate pairs and twelve distinct tools.
pub fn merge_corpus() -> Vec<ToolManifest> {
    let mut out = Vec::new();
    let solvent = || ParamSpec::new("solvent", SemanticType::String);
    let mut pair = |name: &str, desc: &str, extra: Vec<ParamSpec>, outputs: Vec<ParamSpec>| {
        let mut inputs = molecule_inputs();
        inputs.extend(extra);
        out.push(manifest(name, desc, "noop_record", inputs, outputs));
    };
    let energy = || vec![ParamSpec::new("energy", SemanticType::Number)];
    pair(
        "dft_single_point_energy",
        "Single point DFT energy of a molecule with density fitting.",
        vec![],
        energy(),
    );
    pair(
        "dft_single_point_energy_solvated",
        "Single point DFT energy of a molecule with implicit solvent.",
        vec![solvent()],
        energy(),
    );
    pair(
        "dft_geometry_optimization",
        "Optimize molecular geometry with DFT and return final structure.",
        vec![],
        energy(),
    );
    pair(
        "dft_geometry_optimization_solvated",
        "Optimize molecular geometry with DFT in implicit solvent and return final structure.",
        vec![solvent()],
        vec![ParamSpec::new("energy", SemanticType::Number)],
    );
    pair(
        "hessian_vibrational_thermochemistry",
        "Compute the molecular Hessian with DFT and run a harmonic vibrational analysis of the molecule; reports thermochemistry.",
        vec![],
        vec![ParamSpec::new("gibbs", SemanticType::Number)],
    );
    pair(
        "hessian_vibrational_analysis",
        "Compute the molecular Hessian with DFT and run a harmonic vibrational analysis of the molecule; reports normal modes.",
        vec![],
        vec![ParamSpec::new("frequencies", SemanticType::List {
            item: Box::new(ParamSpec::new("f", SemanticType::Number)),
        })],
    );
    let distinct = [
        ("smiles_to_3d", "Convert a SMILES string into embedded 3D coordinates."),
        ("orbital_analysis", "Report HOMO and LUMO levels from converged orbitals."),
        ("symmetry_detect", "Detect the molecular point group symmetry."),
        ("mulliken_population", "Mulliken atomic charges from a density matrix."),
        ("tddft_excitations", "Excited states and oscillator strengths via TDDFT."),
        ("line_plot", "Draw a comparison line chart to PNG."),
        ("render_molecule", "Render a ball and stick picture of a structure."),
        ("xyz_reader", "Parse an XYZ file into atoms and coordinates."),
        ("pka_calculator", "Acid dissociation constant from deprotonation free energy."),
        ("ring_strain", "Ring strain energies from isodesmic reaction enthalpies."),
        ("markdown_table", "Format rows as a markdown table for reports."),
        ("unit_convert", "Convert between Hartree, eV and kcal per mol."),
    ];
    for (name, desc) in distinct {
        out.push(filler_manifest(name, desc));
    }
    out
}

/// Writes a fake batch scheduler into `dir` and returns
/// `(submit_command, poll_command)`.
///
/// Submission runs the rendered script immediately with `bash`, honouring its
/// `--output`/`--error`/`--input` directives, then records `COMPLETED|<code>`
/// (or `FAILED|<code>`). Polls first answer `PENDING`, then `RUNNING`, then the
/// recorded terminal state.
pub fn install_fake_scheduler(dir: &Path) -> io::Result<(Vec<String>, Vec<String>)> {
    fs::create_dir_all(dir)?;
    let state = dir.join("state");
    fs::create_dir_all(&state)?;
    let submit = dir.join("fake-sbatch");
    let poll = dir.join("fake-sacct");
    let submit_script = format!(
        r#"#!/bin/bash
set -u
script="$1"
state="{state}"
if grep -q "FAKE_REJECT" "$script"; then echo "sbatch: error: rejected" >&2; exit 1; fi
n=$(ls "$state" | wc -l)
id=$((1000 + n))
out=$(sed -n 's/^#SBATCH --output=//p' "$script")
err=$(sed -n 's/^#SBATCH --error=//p' "$script")
inp=$(sed -n 's/^#SBATCH --input=//p' "$script")
if [ -n "$inp" ]; then bash "$script" <"$inp" >"$out" 2>"$err"; else bash "$script" </dev/null >"$out" 2>"$err"; fi
code=$?
if [ $code -eq 0 ]; then echo "COMPLETED|0:0" >"$state/$id.final"; else echo "FAILED|$code:0" >"$state/$id.final"; fi
echo 0 >"$state/$id.polls"
echo "$id;fakecluster"
"#,
        state = state.display()
    );
    let poll_script = format!(
        r#"#!/bin/bash
state="{state}"
id="$1"
[ -f "$state/$id.final" ] || exit 1
p=$(cat "$state/$id.polls")
echo $((p + 1)) >"$state/$id.polls"
case $p in
  0) echo "PENDING|0:0" ;;
  1) echo "RUNNING|0:0" ;;
  *) cat "$state/$id.final" ;;
esac
"#,
        state = state.display()
    );
    for (path, body) in [(&submit, submit_script), (&poll, poll_script)] {
        fs::write(path, body)?;
        fs::set_permissions(path, fs::Permissions::from_mode(0o755))?;
    }
    let s = |p: &PathBuf| p.to_string_lossy().into_owned();
    Ok((vec![s(&submit)], vec![s(&poll), "{job_id}".into()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::validate_manifest;
    use std::collections::BTreeSet;

    #[test]
    fn every_fixture_manifest_is_valid() {
        let all = core_corpus()
            .into_iter()
            .chain(flat_corpus())
            .chain(merge_corpus());
        for m in all {
            assert!(validate_manifest(&m).is_empty(), "{}: {:?}", m.name, validate_manifest(&m));
        }
    }

    #[test]
    fn corpus_sizes() {
        assert_eq!(flat_corpus().len(), 25);
        let merge = merge_corpus();
        assert_eq!(merge.len(), 18);
        let names: BTreeSet<_> = merge.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names.len(), 18);
        for (a, b) in MERGE_PAIRS {
            assert!(names.contains(a) && names.contains(b));
        }
    }
}
