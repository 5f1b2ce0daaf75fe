/** Thin typed client for the grasp service.
 *
 * The fetch implementation is injectable so tests can run against a stub;
 * the browser entry point passes the real `fetch`.
 */

import type { GraspResponse, RequestParams, ScenePayload } from './types.js';

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public readonly status: number, detail: string) {
    super(detail);
    this.name = 'ApiError';
  }
}

/** Decode the binary cloud payload: u32 point count, then f32 xyz triplets,
 *  all little-endian. */
export function parseCloudPayload(
  buffer: ArrayBuffer,
  imageWidth: number,
  imageHeight: number,
): ScenePayload {
  if (buffer.byteLength < 4) {
    throw new Error(`cloud payload too short: ${buffer.byteLength} bytes`);
  }
  const count = new DataView(buffer).getUint32(0, true);
  const expected = 4 + 12 * count;
  if (buffer.byteLength !== expected) {
    throw new Error(
      `cloud payload length ${buffer.byteLength} != ${expected} for ${count} points`,
    );
  }
  return {
    count,
    positions: new Float32Array(buffer, 4, count * 3),
    imageWidth,
    imageHeight,
  };
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: string };
    if (typeof body.detail === 'string') return body.detail;
  } catch {
    /* non-JSON error body */
  }
  return `request failed with status ${response.status}`;
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  async listScenes(): Promise<string[]> {
    const r = await this.fetchFn(`${this.baseUrl}/api/scenes`);
    if (!r.ok) throw new ApiError(r.status, await errorDetail(r));
    const body = (await r.json()) as { scenes: string[] };
    return body.scenes;
  }

  async fetchCloud(sceneId: string): Promise<ScenePayload> {
    const r = await this.fetchFn(`${this.baseUrl}/api/scene/${sceneId}`);
    if (!r.ok) throw new ApiError(r.status, await errorDetail(r));
    const width = Number(r.headers.get('X-Image-Width') ?? 0);
    const height = Number(r.headers.get('X-Image-Height') ?? 0);
    return parseCloudPayload(await r.arrayBuffer(), width, height);
  }

  imageUrl(sceneId: string): string {
    return `${this.baseUrl}/api/scene/${sceneId}/image`;
  }

  /** POST guidance and return the response verbatim. Throws ApiError on any
   *  non-2xx status (422 = no graspable region at this guidance). */
  async requestGrasps(sceneId: string, params: RequestParams): Promise<GraspResponse> {
    const body: Record<string, unknown> = {
      scene_id: sceneId,
      mode: params.mode === 'grid' ? 'grid' : params.mode,
      k: params.k,
      radius: params.radius,
    };
    if (params.mode === 'click') body.pixel = params.pixel;
    if (params.mode === 'bbox') body.bbox = params.bbox;
    const r = await this.fetchFn(`${this.baseUrl}/api/grasp`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
    if (!r.ok) throw new ApiError(r.status, await errorDetail(r));
    return (await r.json()) as GraspResponse;
  }
}
