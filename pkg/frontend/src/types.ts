/** Wire types of the annotation service (HTTP+JSON, loopback). */

export type LabelMode = "1C1C" | "1C10C";

/** Maximum points per class for each labeling mode (mirrors the server). */
export const MODE_LIMITS: Record<LabelMode, number> = { "1C1C": 1, "1C10C": 10 };

/** Reserved class id marking unlabeled pixels; never a valid point class. */
export const IGNORE = 255;

export interface ClassInfo {
  id: number;
  name: string;
  color: string; // '#rrggbb'
}

/** Integer, 0-indexed pixel coordinates, row-major (x right, y down). */
export interface PointLabel {
  x: number;
  y: number;
  class_id: number;
}

export interface LabelRecord {
  frame_id: string;
  mode: LabelMode;
  points: PointLabel[];
}

/** GET /frames/{id}/labels response; version 0 = never saved. */
export interface LabelDoc extends LabelRecord {
  version: number;
}

/** GET /frames inventory row. */
export interface FrameInfo {
  frame_id: string;
  width: number;
  height: number;
  n_events: number;
  t_ref: number;
  n_points: number;
  version: number;
}

export function pointsEqual(a: PointLabel[], b: PointLabel[]): boolean {
  if (a.length !== b.length) return false;
  return a.every((p, i) =>
    p.x === b[i].x && p.y === b[i].y && p.class_id === b[i].class_id);
}
