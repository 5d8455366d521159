/** Canvas UI wiring: rendering, pointer/keyboard input, save/navigation.
 *
 * All persistence goes through AnnotationApi; pixel coordinates handed to
 * the session are integer, 0-indexed, and independent of the zoom level.
 */

import { AnnotationApi, ApiError } from "./api.js";
import { AnnotationSession } from "./session.js";
import { offendingClasses } from "./validate.js";
import type { LabelMode } from "./types.js";

const ZOOM_LEVELS = [1, 2, 3, 4, 6, 8, 12, 16];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

class AnnotateApp {
  private zoomIndex = 3;
  private image = new Image();
  private highlight = new Set<number>();

  constructor(
    private readonly api: AnnotationApi,
    private readonly session: AnnotationSession,
    private readonly canvas: HTMLCanvasElement,
  ) {}

  // -- rendering ---------------------------------------------------------

  private get zoom(): number {
    return ZOOM_LEVELS[this.zoomIndex];
  }

  private draw(): void {
    const { width, height } = this.session.frame.info;
    this.canvas.width = width;
    this.canvas.height = height;
    this.canvas.style.width = `${width * this.zoom}px`;
    this.canvas.style.height = `${height * this.zoom}px`;
    const ctx = this.canvas.getContext("2d")!;
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, width, height);
    if (this.image.complete && this.image.naturalWidth > 0) {
      ctx.drawImage(this.image, 0, 0);
    }
    for (const p of this.session.points) {
      const cls = this.session.palette.find((c) => c.id === p.class_id);
      ctx.fillStyle = cls ? cls.color : "#ffffff";
      ctx.fillRect(p.x - 1, p.y - 1, 3, 3);
      ctx.strokeStyle = "#000000";
      ctx.lineWidth = 0.5;
      ctx.strokeRect(p.x - 1.5, p.y - 1.5, 4, 4);
    }
    this.renderPalette();
    this.renderStatus();
  }

  private renderPalette(): void {
    const box = el<HTMLDivElement>("palette");
    box.textContent = "";
    this.session.palette.forEach((cls, i) => {
      const btn = document.createElement("button");
      const key = i < 9 ? `${i + 1}` : i === 9 ? "0" : i === 10 ? "-" : "";
      btn.textContent = `${key ? key + " " : ""}${cls.name} (${this.session.countFor(cls.id)})`;
      btn.style.borderLeft = `12px solid ${cls.color}`;
      btn.className =
        (this.session.selectedClass === cls.id ? "selected " : "") +
        (this.highlight.has(cls.id) ? "offending" : "");
      btn.onclick = () => {
        this.session.selectClass(cls.id);
        this.draw();
      };
      box.appendChild(btn);
    });
  }

  private renderStatus(): void {
    const f = this.session.frame;
    el("status").textContent =
      `${f.info.frame_id} (${this.session.current + 1}/${this.session.frames.length}) ` +
      `[${f.status}] mode ${this.session.mode} zoom ${this.zoom}x v${this.session.version}` +
      (this.session.dirty ? " *unsaved*" : "");
  }

  private banner(text: string, retry?: () => void): void {
    const box = el<HTMLDivElement>("banner");
    box.textContent = text;
    box.style.display = text ? "block" : "none";
    if (retry) {
      const btn = document.createElement("button");
      btn.textContent = "retry";
      btn.onclick = () => {
        this.banner("");
        retry();
      };
      box.appendChild(btn);
    }
  }

  // -- input -------------------------------------------------------------

  /** Canvas-relative pointer position -> integer frame pixel (zoom-free). */
  private pixelOf(ev: MouseEvent): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return {
      x: Math.floor((ev.clientX - rect.left) * (this.canvas.width / rect.width)),
      y: Math.floor((ev.clientY - rect.top) * (this.canvas.height / rect.height)),
    };
  }

  private onClick(ev: MouseEvent): void {
    const { x, y } = this.pixelOf(ev);
    const outcome = this.session.placePoint(x, y, () =>
      window.confirm("Replace the existing point of this class?"));
    this.highlight.clear();
    if (outcome.kind === "rejected") {
      this.highlight = offendingClasses([outcome.reason]);
      this.banner(outcome.reason);
    } else {
      this.banner("");
    }
    this.draw();
  }

  private onContextMenu(ev: MouseEvent): void {
    ev.preventDefault();
    const { x, y } = this.pixelOf(ev);
    if (this.session.removePointNear(x, y, Math.max(3, 8 / this.zoom))) this.draw();
  }

  private onKey(ev: KeyboardEvent): void {
    if (ev.key === "+" || ev.key === "=") this.setZoom(this.zoomIndex + 1);
    else if (ev.key === "_") this.setZoom(this.zoomIndex - 1);
    else if (ev.key === "s") void this.save();
    else if (ev.key === "n" || ev.key === "ArrowRight") void this.navigate(+1);
    else if (ev.key === "p" || ev.key === "ArrowLeft") void this.navigate(-1);
    else {
      const cls = this.session.shortcutClass(ev.key);
      if (cls !== null) {
        this.session.selectClass(cls);
        this.draw();
      }
    }
  }

  private setZoom(index: number): void {
    this.zoomIndex = Math.min(ZOOM_LEVELS.length - 1, Math.max(0, index));
    this.draw();
  }

  // -- persistence and navigation ----------------------------------------

  async save(): Promise<void> {
    let record;
    try {
      record = this.session.record();
    } catch (err) {
      // pre-submit validation failed: nothing was sent
      const violations = (err as { violations?: string[] }).violations ?? [String(err)];
      this.highlight = offendingClasses(violations);
      this.banner(violations.join("; "));
      this.draw();
      return;
    }
    const frameId = this.session.frame.info.frame_id;
    try {
      const resp = await this.api.putLabels(frameId, record);
      const { conflict } = this.session.markSaved(resp.version);
      this.banner(conflict
        ? "saved, but another writer had changed this frame (their points were replaced)"
        : "");
    } catch (err) {
      if (err instanceof ApiError) {
        this.highlight = offendingClasses(err.violations);
        this.banner(`save rejected: ${[err.message, ...err.violations].join("; ")}`);
      } else {
        // network failure: points stay in the session, offer a retry
        this.banner(`save failed: ${String(err)}`, () => void this.save());
      }
    }
    this.draw();
  }

  async navigate(step: number): Promise<void> {
    const next = this.session.current + step;
    if (next < 0 || next >= this.session.frames.length) return;
    if (!this.session.canLeave(() =>
      window.confirm("Discard unsaved changes on this frame?"))) return;
    await this.load(next);
  }

  skip(): void {
    this.session.markSkipped();
    void this.navigate(+1);
  }

  async load(index: number): Promise<void> {
    const frameId = this.session.frames[index].info.frame_id;
    try {
      const doc = await this.api.labels(frameId);
      this.session.goTo(index, doc);
    } catch (err) {
      this.banner(`load failed: ${String(err)}`, () => void this.load(index));
      return;
    }
    (el<HTMLSelectElement>("mode")).value = this.session.mode;
    this.image = new Image();
    this.image.onload = () => this.draw();
    this.image.src = this.api.imageUrl(frameId);
    this.highlight.clear();
    this.banner("");
    this.draw();
  }

  async start(): Promise<void> {
    this.canvas.addEventListener("click", (ev) => this.onClick(ev));
    this.canvas.addEventListener("contextmenu", (ev) => this.onContextMenu(ev));
    window.addEventListener("keydown", (ev) => this.onKey(ev));
    window.addEventListener("beforeunload", (ev) => {
      if (this.session.dirty) ev.preventDefault();
    });
    el("save").onclick = () => void this.save();
    el("next").onclick = () => void this.navigate(+1);
    el("prev").onclick = () => void this.navigate(-1);
    el("skip").onclick = () => this.skip();
    el("zoom-in").onclick = () => this.setZoom(this.zoomIndex + 1);
    el("zoom-out").onclick = () => this.setZoom(this.zoomIndex - 1);
    el<HTMLSelectElement>("mode").onchange = (ev) => {
      const sel = ev.target as HTMLSelectElement;
      const violations = this.session.setMode(sel.value as LabelMode);
      if (violations.length > 0) {
        sel.value = this.session.mode;
        this.banner(`cannot switch mode: ${violations.join("; ")}`);
      }
      this.draw();
    };
    await this.load(0);
    if (this.session.palette.length > 0) {
      this.session.selectClass(this.session.palette[0].id);
      this.draw();
    }
  }
}

async function boot(): Promise<void> {
  const api = new AnnotationApi("");
  const [frames, palette] = await Promise.all([api.frames(), api.classes()]);
  const session = new AnnotationSession(frames, palette);
  const app = new AnnotateApp(api, session, el<HTMLCanvasElement>("frame"));
  await app.start();
}

window.addEventListener("DOMContentLoaded", () => void boot());
