/** Thin client for the annotation service; the only backend access path. */

import type { ClassInfo, FrameInfo, LabelDoc, LabelRecord } from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
    readonly violations: string[] = [],
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export class AnnotationApi {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async request(method: string, path: string, body?: unknown): Promise<unknown> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method,
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const doc = (await resp.json()) as Record<string, unknown>;
    if (!resp.ok) {
      throw new ApiError(
        resp.status,
        String(doc.error ?? `HTTP ${resp.status}`),
        (doc.violations as string[]) ?? [],
      );
    }
    return doc;
  }

  async frames(): Promise<FrameInfo[]> {
    const doc = (await this.request("GET", "/frames")) as { frames: FrameInfo[] };
    return doc.frames;
  }

  async classes(): Promise<ClassInfo[]> {
    const doc = (await this.request("GET", "/classes")) as { classes: ClassInfo[] };
    return doc.classes;
  }

  async labels(frameId: string): Promise<LabelDoc> {
    return (await this.request("GET", `/frames/${frameId}/labels`)) as LabelDoc;
  }

  /** Replace a frame's points; resolves to the new server version. */
  async putLabels(
    frameId: string,
    record: { mode: string; points: LabelRecord["points"] },
  ): Promise<{ frame_id: string; version: number }> {
    return (await this.request("PUT", `/frames/${frameId}/labels`, record)) as {
      frame_id: string;
      version: number;
    };
  }

  async exportBundle(): Promise<{ frames: LabelRecord[] }> {
    return (await this.request("GET", "/export")) as { frames: LabelRecord[] };
  }

  imageUrl(frameId: string): string {
    return `${this.baseUrl}/frames/${frameId}/image`;
  }
}
