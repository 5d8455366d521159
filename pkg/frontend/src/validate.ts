/** Client-side mirror of the server's point-label constraints.
 *
 * The rules AND the violation strings match the server byte-for-byte, so a
 * record the client accepts is exactly a record the server accepts; the
 * round-trip suite asserts this parity against the live service.
 */

import { IGNORE, MODE_LIMITS, type LabelMode, type PointLabel } from "./types.js";

export function validatePoints(
  points: PointLabel[],
  mode: string,
  width?: number,
  height?: number,
  classIds?: Set<number>,
): string[] {
  const problems: string[] = [];
  if (!(mode in MODE_LIMITS)) return [`unknown mode '${mode}'`];
  const limit = MODE_LIMITS[mode as LabelMode];
  const perClass = new Map<number, number>();
  const seenXY = new Set<string>();
  for (const { x, y, class_id: c } of points) {
    perClass.set(c, (perClass.get(c) ?? 0) + 1);
    const key = `${x},${y}`;
    if (seenXY.has(key)) problems.push(`duplicate point at (${x}, ${y})`);
    seenXY.add(key);
    if (c < 0 || c === IGNORE) {
      problems.push(`illegal class id ${c}`);
    } else if (classIds !== undefined && !classIds.has(c)) {
      problems.push(`class id ${c} not in palette`);
    }
    if (width !== undefined && height !== undefined &&
        !(x >= 0 && x < width && y >= 0 && y < height)) {
      problems.push(`point (${x}, ${y}) out of bounds ${width}x${height}`);
    }
  }
  for (const [c, n] of [...perClass.entries()].sort((a, b) => a[0] - b[0])) {
    if (n > limit) problems.push(`class ${c} has ${n} points, ${mode} allows ${limit}`);
  }
  return problems;
}

/** Class ids named in violation strings, for palette highlighting. */
export function offendingClasses(violations: string[]): Set<number> {
  const out = new Set<number>();
  for (const v of violations) {
    const m = v.match(/class(?: id)? (\d+)/);
    if (m) out.add(Number(m[1]));
  }
  return out;
}
