"""Incremental task protocols: class partitions and per-task data filtering.

A protocol partitions the label space into an ordered sequence of tasks. The
training set of task t is every image with at least one annotation of a
task-t class, with the visible annotations filtered down to exactly those
classes. Objects of earlier or later tasks stay in the pixels but lose their
labels, which is what produces the background-shift condition the replay
machinery exists to counter.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .manifest import DatasetManifest, ManifestError


class ProtocolError(ValueError):
    """Raised for malformed plans or plan/manifest mismatches."""


@dataclass(frozen=True)
class TaskSpec:
    index: int
    new_classes: tuple[int, ...]

    def __post_init__(self):
        if self.index < 1:
            raise ProtocolError(f"task index must be >= 1, got {self.index}")
        if not self.new_classes:
            raise ProtocolError(f"task {self.index} has no classes")
        if len(set(self.new_classes)) != len(self.new_classes):
            raise ProtocolError(f"task {self.index} repeats a class")


@dataclass(frozen=True)
class ProtocolPlan:
    name: str
    tasks: tuple[TaskSpec, ...]

    def __post_init__(self):
        if [t.index for t in self.tasks] != list(range(1, len(self.tasks) + 1)):
            raise ProtocolError("task indices must run consecutively from 1")
        seen = set()
        for task in self.tasks:
            overlap = seen.intersection(task.new_classes)
            if overlap:
                raise ProtocolError(f"classes {sorted(overlap)} appear in two tasks")
            seen.update(task.new_classes)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def classes_up_to(self, task_index: int) -> tuple[int, ...]:
        """All classes introduced by tasks 1..task_index, in introduction order."""
        out = []
        for task in self.tasks[:task_index]:
            out.extend(task.new_classes)
        return tuple(out)

    def all_classes(self) -> tuple[int, ...]:
        return self.classes_up_to(self.num_tasks)


def parse_plan(spec: str, class_ids) -> ProtocolPlan:
    """Build a plan from an "A-B" string over the given ordered class ids.

    "A-B" takes the first A ids as task 1, then increments of B until the ids
    are exhausted (the final task may be smaller). Example: 8 classes with
    "4-4" gives two tasks of four classes each.
    """
    class_ids = list(class_ids)
    parts = spec.split("-")
    if len(parts) != 2:
        raise ProtocolError(f"plan '{spec}' is not of the form 'A-B'")
    try:
        initial, step = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ProtocolError(f"plan '{spec}' is not of the form 'A-B'") from exc
    if initial < 1 or step < 1:
        raise ProtocolError(f"plan '{spec}' needs positive task sizes")
    if initial > len(class_ids):
        raise ProtocolError(
            f"plan '{spec}' wants {initial} initial classes but only "
            f"{len(class_ids)} exist"
        )
    tasks = [TaskSpec(index=1, new_classes=tuple(class_ids[:initial]))]
    pos = initial
    while pos < len(class_ids):
        chunk = tuple(class_ids[pos:pos + step])
        tasks.append(TaskSpec(index=len(tasks) + 1, new_classes=chunk))
        pos += step
    return ProtocolPlan(name=spec, tasks=tuple(tasks))


def load_plan_file(path, manifest: DatasetManifest) -> ProtocolPlan:
    """Read an explicit plan: one task per line, whitespace-separated class names."""
    path = Path(path)
    tasks = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        ids = []
        for name in line.split():
            if name not in manifest.class_names:
                raise ProtocolError(f"{path}:{lineno}: unknown class '{name}'")
            ids.append(manifest.class_names[name])
        tasks.append(TaskSpec(index=len(tasks) + 1, new_classes=tuple(ids)))
    if not tasks:
        raise ProtocolError(f"{path}: no tasks defined")
    return ProtocolPlan(name=path.stem, tasks=tuple(tasks))


def resolve_plan(spec, manifest: DatasetManifest) -> ProtocolPlan:
    """Accept a ProtocolPlan, an "A-B" string, or a plan-file path."""
    if isinstance(spec, ProtocolPlan):
        check_plan(spec, manifest)
        return spec
    if isinstance(spec, (str, Path)):
        p = Path(spec)
        if p.exists() and p.is_file():
            return load_plan_file(p, manifest)
        return parse_plan(str(spec), manifest.class_ids())
    raise ProtocolError(f"cannot interpret {type(spec).__name__} as a plan")


def check_plan(plan: ProtocolPlan, manifest: DatasetManifest) -> None:
    known = set(manifest.class_names.values())
    missing = [c for c in plan.all_classes() if c not in known]
    if missing:
        raise ProtocolError(f"plan references classes absent from the manifest: {missing}")


def split_tasks(manifest: DatasetManifest, plan: ProtocolPlan) -> dict[int, DatasetManifest]:
    """Produce each task's training manifest under the incremental protocol.

    Task t keeps every image with >= 1 annotation in the task's class set and
    masks the visible annotations down to exactly that set. Images holding
    classes of several tasks repeat across those tasks.
    """
    check_plan(plan, manifest)
    out = {}
    for task in plan.tasks:
        wanted = set(task.new_classes)
        entries = []
        for entry in manifest.entries:
            keep = [i for i, ann in enumerate(entry.objects) if ann.class_id in wanted]
            if not keep:
                continue
            difficult = None
            if entry.difficult is not None:
                difficult = tuple(entry.difficult[i] for i in keep)
            entries.append(type(entry)(
                image=entry.image,
                width=entry.width,
                height=entry.height,
                objects=tuple(entry.objects[i] for i in keep),
                difficult=difficult,
            ))
        out[task.index] = DatasetManifest(
            entries=tuple(entries),
            class_names=dict(manifest.class_names),
            root=manifest.root,
        )
    return out
