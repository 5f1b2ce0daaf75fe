import { describe, expect, it } from 'vitest';

import { ApiClient, ApiError, parseCloudPayload } from '../src/api.js';
import type { GraspResponse } from '../src/types.js';

function cloudBuffer(points: number[][]): ArrayBuffer {
  const buffer = new ArrayBuffer(4 + 12 * points.length);
  new DataView(buffer).setUint32(0, points.length, true);
  const f32 = new Float32Array(buffer, 4);
  points.forEach((p, i) => f32.set(p, 3 * i));
  return buffer;
}

describe('parseCloudPayload', () => {
  it('decodes the point count and xyz triplets', () => {
    const payload = parseCloudPayload(
      cloudBuffer([[0.1, -0.2, 0.6], [0, 0, 1]]), 320, 240);
    expect(payload.count).toBe(2);
    expect(payload.imageWidth).toBe(320);
    expect(payload.imageHeight).toBe(240);
    expect(Array.from(payload.positions.subarray(0, 3))).toEqual([
      Math.fround(0.1), Math.fround(-0.2), Math.fround(0.6),
    ]);
  });

  it('decodes an empty cloud', () => {
    const payload = parseCloudPayload(cloudBuffer([]), 320, 240);
    expect(payload.count).toBe(0);
    expect(payload.positions.length).toBe(0);
  });

  it('rejects truncated payloads', () => {
    const buffer = cloudBuffer([[1, 2, 3]]).slice(0, 10);
    expect(() => parseCloudPayload(buffer, 320, 240)).toThrow(/length/);
  });
});

type Call = { url: string; init?: RequestInit };

function stubFetch(responder: (call: Call) => Response): { calls: Call[]; fetch: (url: string, init?: RequestInit) => Promise<Response> } {
  const calls: Call[] = [];
  return {
    calls,
    fetch: (url, init) => {
      const call = { url, init };
      calls.push(call);
      return Promise.resolve(responder(call));
    },
  };
}

const SAMPLE_RESPONSE: GraspResponse = {
  scene_id: 'scene_0000',
  mode: 'click',
  k: 8,
  radius: 0.08,
  grasps: [
    {
      t: [0.01, -0.02, 0.61],
      euler: [0.5, -0.3, 0.2],
      width: 0.04,
      score: 0.9,
      region_index: 0,
      combo: [3, 2, 4],
      source_pixel: [160, 120],
    },
  ],
};

describe('ApiClient', () => {
  it('lists scenes', async () => {
    const stub = stubFetch(() => Response.json({ scenes: ['a', 'b'] }));
    const api = new ApiClient('http://svc', stub.fetch);
    expect(await api.listScenes()).toEqual(['a', 'b']);
    expect(stub.calls[0].url).toBe('http://svc/api/scenes');
  });

  it('posts click guidance with exact body fields', async () => {
    const stub = stubFetch(() => Response.json(SAMPLE_RESPONSE));
    const api = new ApiClient('http://svc', stub.fetch);
    const response = await api.requestGrasps('scene_0000', {
      mode: 'click', k: 8, radius: 0.08, pixel: [160, 120],
    });
    expect(stub.calls[0].url).toBe('http://svc/api/grasp');
    const body = JSON.parse(String(stub.calls[0].init?.body));
    expect(body).toEqual({
      scene_id: 'scene_0000', mode: 'click', k: 8, radius: 0.08, pixel: [160, 120],
    });
    // the client hands the response through verbatim
    expect(response).toEqual(SAMPLE_RESPONSE);
  });

  it('posts bbox guidance with the box, not a pixel', async () => {
    const stub = stubFetch(() => Response.json({ ...SAMPLE_RESPONSE, mode: 'bbox' }));
    const api = new ApiClient('http://svc', stub.fetch);
    await api.requestGrasps('scene_0000', {
      mode: 'bbox', k: 4, radius: 0.06, bbox: [10, 20, 100, 200],
    });
    const body = JSON.parse(String(stub.calls[0].init?.body));
    expect(body.bbox).toEqual([10, 20, 100, 200]);
    expect(body.pixel).toBeUndefined();
  });

  it('maps 422 to an ApiError carrying the service detail', async () => {
    const stub = stubFetch(() =>
      Response.json({ detail: 'click at (5, 5) has no valid depth' }, { status: 422 }));
    const api = new ApiClient('http://svc', stub.fetch);
    const err = await api
      .requestGrasps('scene_0000', { mode: 'click', k: 8, radius: 0.08, pixel: [5, 5] })
      .then(() => null, (e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(422);
    expect((err as ApiError).message).toMatch(/no valid depth/);
  });

  it('maps 404 and non-JSON error bodies', async () => {
    const stub = stubFetch(() => new Response('gone', { status: 404 }));
    const api = new ApiClient('http://svc', stub.fetch);
    const err = await api.listScenes().then(() => null, (e: unknown) => e);
    expect((err as ApiError).status).toBe(404);
  });

  it('fetches and parses the binary cloud with image-size headers', async () => {
    const stub = stubFetch(() =>
      new Response(cloudBuffer([[0, 0, 0.5]]), {
        headers: { 'X-Image-Width': '320', 'X-Image-Height': '240' },
      }));
    const api = new ApiClient('http://svc', stub.fetch);
    const payload = await api.fetchCloud('scene_0000');
    expect(payload.count).toBe(1);
    expect(payload.imageWidth).toBe(320);
    expect(payload.imageHeight).toBe(240);
  });
});
