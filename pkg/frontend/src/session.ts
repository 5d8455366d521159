/** Annotation session state, kept free of DOM and network concerns.
 *
 * Invariants:
 *  - the in-progress point set always satisfies the active mode's per-class
 *    limits (placePoint blocks or replaces instead of exceeding them);
 *  - `dirty` is true iff the point set differs from the last loaded/saved
 *    server state;
 *  - `record()` refuses to produce a submission the server would reject.
 */

import {
  MODE_LIMITS,
  pointsEqual,
  type ClassInfo,
  type FrameInfo,
  type LabelDoc,
  type LabelMode,
  type PointLabel,
} from "./types.js";
import { validatePoints } from "./validate.js";

export type FrameStatus = "unlabeled" | "labeled" | "skipped";

export interface SessionFrame {
  info: FrameInfo;
  status: FrameStatus;
}

export type PlaceOutcome =
  | { kind: "placed" }
  | { kind: "replaced"; previous: PointLabel }
  | { kind: "rejected"; reason: string }
  | { kind: "cancelled" };

export class ValidationFailure extends Error {
  constructor(readonly violations: string[]) {
    super(violations.join("; "));
    this.name = "ValidationFailure";
  }
}

export class AnnotationSession {
  readonly frames: SessionFrame[];
  readonly palette: ClassInfo[];
  private readonly classIds: Set<number>;
  mode: LabelMode;
  current = 0;
  selectedClass: number | null = null;
  points: PointLabel[] = [];
  /** Server version the current point set was loaded from / saved as. */
  version = 0;
  private saved: PointLabel[] = [];

  constructor(frames: FrameInfo[], palette: ClassInfo[], mode: LabelMode = "1C1C") {
    if (frames.length === 0) throw new Error("session needs at least one frame");
    this.frames = frames.map((info) => ({
      info,
      status: info.n_points > 0 ? "labeled" : "unlabeled",
    }));
    this.palette = palette;
    this.classIds = new Set(palette.map((c) => c.id));
    this.mode = mode;
  }

  get frame(): SessionFrame {
    return this.frames[this.current];
  }

  get dirty(): boolean {
    return !pointsEqual(this.points, this.saved);
  }

  selectClass(classId: number): boolean {
    if (!this.classIds.has(classId)) return false;
    this.selectedClass = classId;
    return true;
  }

  /** Keyboard shortcut -> palette entry: '1'..'9' are entries 0..8,
   *  '0' is entry 9, '-' entry 10. Null when the palette is shorter. */
  shortcutClass(key: string): number | null {
    let index: number;
    if (key >= "1" && key <= "9") index = key.charCodeAt(0) - "1".charCodeAt(0);
    else if (key === "0") index = 9;
    else if (key === "-") index = 10;
    else return null;
    return index < this.palette.length ? this.palette[index].id : null;
  }

  countFor(classId: number): number {
    return this.points.filter((p) => p.class_id === classId).length;
  }

  /** Place a point of the selected class at integer pixel (x, y).
   *
   * In 1C1C mode a second point of an already-placed class replaces the
   * first, but only after confirmReplace() agrees; other limit or
   * constraint breaches are rejected outright so the in-progress set can
   * never violate the mode.
   */
  placePoint(x: number, y: number, confirmReplace: () => boolean): PlaceOutcome {
    const cls = this.selectedClass;
    if (cls === null) return { kind: "rejected", reason: "no class selected" };
    if (!Number.isInteger(x) || !Number.isInteger(y)) {
      return { kind: "rejected", reason: `non-integer pixel (${x}, ${y})` };
    }
    const { width, height } = this.frame.info;
    const candidate = { x, y, class_id: cls };
    const single = validatePoints([candidate], this.mode, width, height, this.classIds);
    if (single.length > 0) return { kind: "rejected", reason: single[0] };
    if (this.points.some((p) => p.x === x && p.y === y)) {
      return { kind: "rejected", reason: `duplicate point at (${x}, ${y})` };
    }
    if (this.countFor(cls) >= MODE_LIMITS[this.mode]) {
      if (this.mode !== "1C1C") {
        return {
          kind: "rejected",
          reason: `class ${cls} has ${this.countFor(cls) + 1} points, ` +
            `${this.mode} allows ${MODE_LIMITS[this.mode]}`,
        };
      }
      if (!confirmReplace()) return { kind: "cancelled" };
      const previous = this.points.find((p) => p.class_id === cls)!;
      this.points = this.points.filter((p) => p.class_id !== cls);
      this.points.push(candidate);
      return { kind: "replaced", previous };
    }
    this.points.push(candidate);
    return { kind: "placed" };
  }

  /** Remove the point nearest to (x, y) within maxDist pixels. */
  removePointNear(x: number, y: number, maxDist = 3): boolean {
    let best = -1;
    let bestD = maxDist * maxDist + 1e-9;
    this.points.forEach((p, i) => {
      const d = (p.x - x) ** 2 + (p.y - y) ** 2;
      if (d <= bestD) {
        best = i;
        bestD = d;
      }
    });
    if (best < 0) return false;
    this.points.splice(best, 1);
    return true;
  }

  /** Switch labeling mode; refused when the current points would violate it. */
  setMode(mode: LabelMode): string[] {
    const violations = validatePoints(this.points, mode);
    if (violations.length === 0) this.mode = mode;
    return violations;
  }

  /** Install a frame's server-side state after navigation or reload. */
  goTo(index: number, doc: LabelDoc): void {
    if (index < 0 || index >= this.frames.length) {
      throw new Error(`frame index ${index} out of range`);
    }
    this.current = index;
    this.points = doc.points.map((p) => ({ ...p }));
    this.saved = doc.points.map((p) => ({ ...p }));
    this.version = doc.version;
    if (doc.points.length > 0) this.frame.status = "labeled";
    if (doc.mode in MODE_LIMITS) this.mode = doc.mode;
  }

  /** Navigation guard: a dirty frame is only left with explicit consent. */
  canLeave(confirmDiscard: () => boolean): boolean {
    return !this.dirty || confirmDiscard();
  }

  /** The record to submit; throws instead of yielding an invalid one. */
  record(): { mode: LabelMode; points: PointLabel[] } {
    const { width, height } = this.frame.info;
    const violations = validatePoints(this.points, this.mode, width, height, this.classIds);
    if (violations.length > 0) throw new ValidationFailure(violations);
    return { mode: this.mode, points: this.points.map((p) => ({ ...p })) };
  }

  /** Mark the in-progress set as persisted.
   *
   * Returns conflict=true when the server version advanced by more than one,
   * i.e. another writer saved since this frame was loaded (the server keeps
   * the last write; the user is told theirs overwrote someone else's).
   */
  markSaved(serverVersion: number): { conflict: boolean } {
    const conflict = serverVersion !== this.version + 1;
    this.version = serverVersion;
    this.saved = this.points.map((p) => ({ ...p }));
    this.frame.info.version = serverVersion;
    this.frame.info.n_points = this.points.length;
    this.frame.status = this.points.length > 0 ? "labeled" : "unlabeled";
    return { conflict };
  }

  markSkipped(): void {
    this.frame.status = "skipped";
  }
}
